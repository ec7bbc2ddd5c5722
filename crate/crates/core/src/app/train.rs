//! Training the linear head from gated submap pairs labelled with simulator
//! truth, and the validation report comparing it with the engineered model
//! and the zeroth-order (constant) predictor.
//!
//! Losses are reported in centimetres: the Huber loss is evaluated on
//! errors in cm with the threshold also converted to cm.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::app::config::Config;
use crate::app::pipeline::{frontend, Frontend};
use crate::error::{Error, Result};
use crate::geom::wrap_angle;
use crate::regmodel::{corr_feat, engineered_register, huber, train_linear_head, FilterBank, LearnedModel};
use crate::simworld::RawDataset;

/// One labelled pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledPair {
    pub dataset: usize,
    /// Argmax vector of the correlation features, columns.
    pub features: Vec<f64>,
    /// Engineered model translation, m.
    pub engineered: f64,
    /// True along-track translation, m.
    pub target: f64,
}

/// Labels every gated pair of `front` whose true relative pose is a clean
/// along-track offset within the searched shift range.
pub fn label_pairs(
    front: &Frontend,
    data: &RawDataset,
    cfg: &Config,
    bank: &FilterBank,
    dataset: usize,
) -> Result<Vec<LabelledPair>> {
    let tc = &cfg.training;
    let pairs: Vec<_> = front.pairs().copied().collect();
    let labelled: Vec<Option<LabelledPair>> = pairs
        .par_iter()
        .map(|p| {
            let (old, new) = (&front.submaps[p.older].submap, &front.submaps[p.newer].submap);
            let (Some(a), Some(b)) = (data.truth_at(old.start_time), data.truth_at(new.start_time)) else {
                return Ok(None);
            };
            let rel = a.inverse().compose(&b);
            let length = (new.cols() - 1) as f64 * new.spacing();
            let (target, yaw_err) = if p.flipped {
                (rel.x() - length, wrap_angle(rel.yaw() - std::f64::consts::PI))
            } else {
                (rel.x(), wrap_angle(rel.yaw()))
            };
            let cols = old.cols().min(new.cols());
            let limit = cfg.registration.max_shift(cols) as f64 * new.spacing();
            if rel.y().abs() >= tc.max_lateral || yaw_err.abs() >= tc.max_heading || target.abs() > limit {
                return Ok(None);
            }
            let image2 = if p.flipped { new.image.mirrored() } else { new.image.clone() };
            let cf = corr_feat(&old.image, &image2, bank, &cfg.registration)?;
            let eng = engineered_register(&old.image, &image2, &cfg.registration, cfg.salience.gate_threshold)?;
            Ok(Some(LabelledPair { dataset, features: cf.as_f64(), engineered: eng.translation, target }))
        })
        .collect::<Result<_>>()?;
    Ok(labelled.into_iter().flatten().collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossRow {
    pub name: String,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    /// Mean Huber loss, cm.
    pub learned: f64,
    pub engineered: f64,
    pub zeroth: f64,
    /// Mean absolute error, cm.
    pub learned_mae: f64,
    pub engineered_mae: f64,
    pub zeroth_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub combined: LossRow,
    /// Mean training target, m: the zeroth-order prediction.
    pub zeroth_prediction: f64,
    pub ridge_used: bool,
    pub iterations: usize,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "validation loss (cm): huber / mean |error|").unwrap();
        writeln!(s, "{:<16} {:>6} {:>6} {:>20} {:>20} {:>20}", "dataset", "train", "val", "learned", "engineered", "zeroth")
            .unwrap();
        for r in self.rows.iter().chain(std::iter::once(&self.combined)) {
            let cell = |h: f64, m: f64| format!("{h:.2} / {m:.2}");
            writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>20} {:>20} {:>20}",
                r.name,
                r.train_pairs,
                r.validation_pairs,
                cell(r.learned, r.learned_mae),
                cell(r.engineered, r.engineered_mae),
                cell(r.zeroth, r.zeroth_mae)
            )
            .unwrap();
        }
        writeln!(s, "zeroth prediction: {:.4} m", self.zeroth_prediction).unwrap();
        writeln!(s, "irls iterations: {}, ridge fallback: {}", self.iterations, self.ridge_used).unwrap();
        s
    }
}

fn score(name: &str, train: usize, val: &[&LabelledPair], model: &LearnedModel, zeroth: f64, delta: f64) -> LossRow {
    let n = val.len().max(1) as f64;
    let d = delta * 100.0;
    let mut row = LossRow { name: name.to_string(), train_pairs: train, validation_pairs: val.len(), ..Default::default() };
    for p in val {
        let errs = [
            (model.head.predict(&p.features) - p.target) * 100.0,
            (p.engineered - p.target) * 100.0,
            (zeroth - p.target) * 100.0,
        ];
        row.learned += huber(errs[0], d) / n;
        row.engineered += huber(errs[1], d) / n;
        row.zeroth += huber(errs[2], d) / n;
        row.learned_mae += errs[0].abs() / n;
        row.engineered_mae += errs[1].abs() / n;
        row.zeroth_mae += errs[2].abs() / n;
    }
    row
}

/// Splits labelled pairs per dataset, fits the head on the union of the
/// training parts and scores all three predictors on the validation parts.
pub fn train_from_pairs(
    pairs: &[LabelledPair],
    names: &[String],
    cfg: &Config,
    bank: FilterBank,
) -> Result<(LearnedModel, TrainReport)> {
    let tc = &cfg.training;
    let mut train = Vec::new();
    let mut val: Vec<Vec<&LabelledPair>> = vec![Vec::new(); names.len()];
    let mut train_counts = vec![0; names.len()];
    for (d, _) in names.iter().enumerate() {
        let mut mine: Vec<&LabelledPair> = pairs.iter().filter(|p| p.dataset == d).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(d as u64));
        mine.shuffle(&mut rng);
        let cut = ((mine.len() as f64) * tc.split).round() as usize;
        train_counts[d] = cut;
        train.extend(mine[..cut].iter().map(|p| (p.features.clone(), p.target)));
        val[d].extend_from_slice(&mine[cut..]);
    }
    if val.iter().all(|v| v.is_empty()) {
        return Err(Error::TooFew { needed: 1, have: 0 });
    }
    let head = train_linear_head(&train, cfg.submap.spacing, &tc.head)?;
    let zeroth = train.iter().map(|p| p.1).sum::<f64>() / train.len() as f64;
    let model = LearnedModel { bank, head, gate_threshold: cfg.salience.gate_threshold };
    let delta = tc.head.delta;
    let rows: Vec<LossRow> =
        names.iter().enumerate().map(|(d, name)| score(name, train_counts[d], &val[d], &model, zeroth, delta)).collect();
    let all: Vec<&LabelledPair> = val.iter().flatten().copied().collect();
    let combined = score("combined", train.len(), &all, &model, zeroth, delta);
    let report = TrainReport {
        rows,
        combined,
        zeroth_prediction: zeroth,
        ridge_used: model.head.ridge_used,
        iterations: model.head.iterations,
    };
    Ok((model, report))
}

/// Runs the front end on every dataset, labels the gated pairs and trains.
pub fn train_command(datasets: &[(String, &RawDataset)], cfg: &Config) -> Result<(LearnedModel, TrainReport)> {
    let fronts: Vec<Frontend> = datasets.iter().map(|(_, d)| frontend(d, cfg)).collect::<Result<_>>()?;
    let items: Vec<(String, &Frontend, &RawDataset)> =
        datasets.iter().zip(&fronts).map(|((n, d), f)| (n.clone(), f, *d)).collect();
    train_on_frontends(&items, cfg)
}

/// Labels the gated pairs of already computed front ends and trains.
pub fn train_on_frontends(
    items: &[(String, &Frontend, &RawDataset)],
    cfg: &Config,
) -> Result<(LearnedModel, TrainReport)> {
    if items.len() < 2 {
        return Err(Error::TooFew { needed: 2, have: items.len() });
    }
    let bank = FilterBank::standard(cfg.pipeline.bank_size, cfg.pipeline.bank_seed)?;
    let mut pairs = Vec::new();
    for (d, (_, front, data)) in items.iter().enumerate() {
        pairs.extend(label_pairs(front, data, cfg, &bank, d)?);
    }
    let names: Vec<String> = items.iter().map(|(n, _, _)| n.clone()).collect();
    train_from_pairs(&pairs, &names, cfg, bank)
}
