//! Paired training runs that differ in one architectural choice.

use serde::{Deserialize, Serialize};

use crate::data::{evaluate, ConstantPredictor, Dataset};
use crate::error::Result;
use crate::gaze::mean_predictor_baseline;
use crate::models::{build_variant, ModelVariant, VariantTag};
use crate::train::{train, TrainPlan};
use crate::transformer::AttentionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub variant: ModelVariant,
    pub parameters: usize,
    pub losses: Vec<f64>,
    /// Held-out mean angular error in degrees.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub name: String,
    pub a: ArmResult,
    pub b: ArmResult,
    /// `b.error - a.error`.
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub plan: TrainPlan,
    pub train_samples: usize,
    pub test_samples: usize,
    pub mean_baseline_error: f64,
    pub pairs: Vec<PairResult>,
}

impl AblationReport {
    /// Fixed-width text table of every pair.
    pub fn summary(&self) -> String {
        let mut s = format!("mean-predictor baseline: {:.3} deg\n", self.mean_baseline_error);
        for p in &self.pairs {
            s += &format!(
                "{:<10} {:<16} {:>8.3} deg ({:>7} params) | {:<16} {:>8.3} deg ({:>7} params) | diff {:+.3}\n",
                p.name, p.a.label, p.a.error, p.a.parameters, p.b.label, p.b.error, p.b.parameters, p.difference
            );
        }
        s
    }
}

fn arm(label: &str, variant: &ModelVariant, seed: u64, train_set: &Dataset, test: &Dataset, plan: &TrainPlan) -> Result<ArmResult> {
    let mut model = build_variant(variant, seed)?;
    let report = train(&mut model, train_set, plan)?;
    Ok(ArmResult {
        label: label.to_string(),
        variant: variant.clone(),
        parameters: model.parameter_count(),
        losses: report.losses(),
        error: evaluate(&model, test)?,
    })
}

/// Trains `a` and `b` with the same seed and plan, so both see the same
/// batches in the same order.
pub fn run_pair(
    name: &str,
    (la, a): (&str, &ModelVariant),
    (lb, b): (&str, &ModelVariant),
    seed: u64,
    train_set: &Dataset,
    test: &Dataset,
    plan: &TrainPlan,
) -> Result<PairResult> {
    let a = arm(la, a, seed, train_set, test, plan)?;
    let b = arm(lb, b, seed, train_set, test, plan)?;
    Ok(PairResult {
        name: name.to_string(),
        difference: b.error - a.error,
        a,
        b,
    })
}

/// Learned versus uniform attention, deep versus shallow stem and, when
/// `conv` is given, hybrid versus the convolutional baseline. `hybrid` must be
/// a hybrid variant; `shallow` its shallow-stem counterpart.
pub fn run_ablation(
    hybrid: &ModelVariant,
    shallow: &ModelVariant,
    conv: Option<&ModelVariant>,
    seed: u64,
    train_set: &Dataset,
    test: &Dataset,
    plan: &TrainPlan,
) -> Result<AblationReport> {
    if hybrid.tag() != VariantTag::Hybrid || shallow.tag() != VariantTag::ShallowHybrid {
        return Err(crate::tensor::TensorError::Config("ablation needs a hybrid and a shallow-hybrid variant".into()).into());
    }
    let learned = hybrid.clone().with_attention(AttentionMode::Learned);
    let uniform = hybrid.clone().with_attention(AttentionMode::UniformAverage);
    let pair = |name: &str, a: ArmResult, b: ArmResult| PairResult {
        name: name.to_string(),
        difference: b.error - a.error,
        a,
        b,
    };
    let deep = arm("hybrid", hybrid, seed, train_set, test, plan)?;
    let mut pairs = vec![
        run_pair("attention", ("learned", &learned), ("uniform-average", &uniform), seed, train_set, test, plan)?,
        pair("stem", deep.clone(), arm("shallow-hybrid", shallow, seed, train_set, test, plan)?),
    ];
    if let Some(c) = conv {
        pairs.push(pair("backbone", deep, arm("conv-baseline", c, seed, train_set, test, plan)?));
    }
    let mean = mean_predictor_baseline(train_set.labels())?;
    Ok(AblationReport {
        seed,
        plan: plan.clone(),
        train_samples: train_set.len(),
        test_samples: test.len(),
        mean_baseline_error: evaluate(&ConstantPredictor(mean), test)?,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn attention_pair_shares_parameter_count_and_reports_difference() {
        let cfg = SyntheticConfig {
            samples: 24,
            subjects: 3,
            test_subjects: 1,
            ..SyntheticConfig::scaled_to(32)
        };
        let d = generate_synthetic(&cfg).unwrap();
        let train_set = d.filter_subjects(|s| !cfg.is_test_subject(s));
        let test = d.filter_subjects(|s| cfg.is_test_subject(s));
        let plan = TrainPlan {
            batch_size: 8,
            epochs: 1,
            warmup_epochs: 0,
            ..TrainPlan::default()
        };
        let r = run_ablation(
            &ModelVariant::toy(VariantTag::Hybrid, 32),
            &ModelVariant::toy(VariantTag::ShallowHybrid, 32),
            Some(&ModelVariant::toy(VariantTag::ConvBaseline, 32)),
            3,
            &train_set,
            &test,
            &plan,
        )
        .unwrap();
        assert_eq!(r.pairs.len(), 3);
        let att = &r.pairs[0];
        assert_eq!(att.a.parameters, att.b.parameters);
        assert_eq!(att.difference, att.b.error - att.a.error);
        assert_ne!(att.a.losses, att.b.losses);
        assert!(r.summary().contains("uniform-average"));
        // the hybrid arm of the stem and backbone pairs is one and the same run
        assert_eq!(r.pairs[1].a, r.pairs[2].a);
    }

    #[test]
    fn rejects_wrong_variants() {
        let d = generate_synthetic(&SyntheticConfig {
            samples: 4,
            ..SyntheticConfig::scaled_to(32)
        })
        .unwrap();
        let v = ModelVariant::toy(VariantTag::Pure, 32);
        assert!(run_ablation(&v, &v, None, 0, &d, &d, &TrainPlan::default()).is_err());
    }
}
