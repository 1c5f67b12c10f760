use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{column, Slvm, StepVars};
use crate::dataset::{NormalizationStats, SequenceBatch, NUM_VISITS};
use crate::error::{Error, Result};
use crate::nn::{reparam, tape::sigmoid, Bound, Dropout, Matrix, NoiseSource, RngNoise, Tape, Var};
use crate::trajectory::{
    action_history, check_action_suffix, check_step, column_mean_std, replicate_rows, ActionMode,
    AdherenceStep, OneStepPrediction, PredictionTrajectory, Provenance, ScoreStep, SequenceModel,
};

/// A named action suffix `a_{t..5}` for the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub trajectories: Vec<PredictionTrajectory>,
    /// Mean of the final-visit predictions over patients, samples and dims.
    pub final_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub start: usize,
    pub samples: usize,
    pub seed: u64,
    pub scenarios: Vec<ScenarioOutcome>,
    /// `deltas[i][j] = final_mean[i] - final_mean[j]`.
    pub deltas: Vec<Vec<f64>>,
}

/// Adherence probability and raw-unit decoder output for `rows` samples.
struct Readout {
    prob: Vec<f64>,
    mean: Matrix,
    std: Matrix,
}

impl Slvm {
    fn readout(&self, tape: &mut Tape, p: &Bound, z1: Var, z2: Var, with_adherence: bool) -> Result<Readout> {
        let z = tape.concat(&[z1, z2]);
        let prob = if with_adherence {
            let logit = self.nets.adherence.forward(tape, p, z, &mut Dropout::Off)?;
            tape.value(logit).iter().map(|&l| sigmoid(l)).collect()
        } else {
            Vec::new()
        };
        let (m, s) = self.nets.decoder.forward(tape, p, z, &mut Dropout::Off)?;
        Ok(Readout {
            prob,
            mean: self.stats.denormalize_scores(tape.value(m))?,
            std: self.stats.denormalize_score_std(tape.value(s))?,
        })
    }

    /// One generative transition `z_t -> z_{t+1}` under `action` (`rows x 1`).
    fn prior_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z2_prev: Var,
        action: &Matrix,
        noise: &mut dyn NoiseSource,
    ) -> Result<StepVars> {
        let a = tape.leaf(action.clone());
        let prior_in = tape.concat(&[z2_prev, a]);
        let (m, s) = self.nets.p1_trans.forward(tape, p, prior_in, &mut Dropout::Off)?;
        let z1 = reparam(tape, m, s, noise);
        let (z2, z2_mean, z2_std) = self.z2_transition(tape, p, z1, z2_prev, a, noise, &mut Dropout::Off)?;
        Ok(StepVars {
            z1,
            z1_mean: m,
            z1_std: s,
            z2,
            z2_mean,
            z2_std,
        })
    }

    /// Filters each patient (replicated `k` times) through step `t` and
    /// predicts `y_t` and `x_{t+1}` using the observed action `a_t`.
    pub fn predict_one_step_with(
        &self,
        batch: &SequenceBatch,
        t: usize,
        k: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<OneStepPrediction>> {
        check_step(t)?;
        self.check_batch(batch)?;
        let k = k.max(1);
        let rep = batch.select(&replicate_rows(batch.len(), k));
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let steps = self.filter_tape(&mut tape, &p, &rep, t - 1, noise, &mut Dropout::Off)?;
        let last = steps[t - 1].vars;
        let prob = self.readout(&mut tape, &p, last.z1, last.z2, true)?.prob;
        let next = self.prior_step(&mut tape, &p, last.z2, &column(&rep.a, t - 1), noise)?;
        let out = self.readout(&mut tape, &p, next.z1, next.z2, false)?;

        Ok((0..batch.len())
            .map(|i| {
                let rows = i * k..(i + 1) * k;
                let (mean, std) = predictive_moments(&out, rows.clone());
                OneStepPrediction {
                    id: batch.ids[i].clone(),
                    step: t,
                    score_mean: mean,
                    score_std: std,
                    adherence_prob: prob[rows].iter().sum::<f64>() / k as f64,
                }
            })
            .collect())
    }

    /// Filters through step `t`, then runs the prior forward to visit 6.
    pub fn rollout_with(
        &self,
        batch: &SequenceBatch,
        t: usize,
        mode: &ActionMode,
        k: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<Vec<PredictionTrajectory>> {
        check_step(t)?;
        self.check_batch(batch)?;
        let n = batch.len();
        if let ActionMode::Fixed(suffix) = mode {
            for b in 0..n {
                check_action_suffix(&action_history(batch, b, t), suffix, t)?;
            }
        }
        let k = k.max(1);
        let rep = batch.select(&replicate_rows(n, k));
        let rows = n * k;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let steps = self.filter_tape(&mut tape, &p, &rep, t - 1, noise, &mut Dropout::Off)?;
        let mut state = steps[t - 1].vars;

        // Treatment stays stopped once any observed action is 0.
        let mut alive: Vec<f64> = (0..rows)
            .map(|r| (0..t - 1).map(|u| rep.a[[r, u]]).fold(1.0, f64::min))
            .collect();
        let mut trajectories: Vec<PredictionTrajectory> = batch
            .ids
            .iter()
            .map(|id| PredictionTrajectory {
                id: id.clone(),
                start: t,
                samples: k,
                scores: Vec::new(),
                adherence: Vec::new(),
            })
            .collect();

        for u in (t - 1)..(NUM_VISITS - 1) {
            let prob = self.readout(&mut tape, &p, state.z1, state.z2, true)?.prob;
            let action: Vec<f64> = match mode {
                ActionMode::Inferred => (0..rows)
                    .map(|r| if alive[r] == 1.0 && prob[r] >= self.threshold { 1.0 } else { 0.0 })
                    .collect(),
                ActionMode::Fixed(suffix) => vec![suffix[u - (t - 1)]; rows],
            };
            alive.clone_from(&action);
            let provenance = if u == t - 1 { Provenance::Filtered } else { Provenance::PriorRollout };
            for (i, traj) in trajectories.iter_mut().enumerate() {
                let r = i * k..(i + 1) * k;
                traj.adherence.push(AdherenceStep {
                    interval: u,
                    prob: prob[r.clone()].iter().sum::<f64>() / k as f64,
                    continued: action[r].iter().sum::<f64>() / k as f64,
                    provenance,
                });
            }

            let a = Array2::from_shape_vec((rows, 1), action).expect("rows x 1");
            state = self.prior_step(&mut tape, &p, state.z2, &a, noise)?;
            let out = self.readout(&mut tape, &p, state.z1, state.z2, false)?;
            for (i, traj) in trajectories.iter_mut().enumerate() {
                let r = i * k..(i + 1) * k;
                let (mean, std) = predictive_moments(&out, r.clone());
                traj.scores.push(ScoreStep {
                    visit: u + 1,
                    mean,
                    std,
                    samples: Some(out.mean.slice(ndarray::s![r, ..]).to_owned()),
                    provenance: Provenance::PriorRollout,
                });
            }
        }
        Ok(trajectories)
    }

    /// Evaluates every scenario from step `t` with common random numbers:
    /// each scenario replays the same noise stream, so differences between
    /// scenarios come from the actions alone.
    pub fn simulate_interventions(
        &self,
        batch: &SequenceBatch,
        t: usize,
        scenarios: &[Scenario],
        k: usize,
        seed: u64,
    ) -> Result<SimulationOutcome> {
        if scenarios.is_empty() {
            return Err(Error::InvalidArgument("no scenarios to simulate".into()));
        }
        check_step(t)?;
        for sc in scenarios {
            for b in 0..batch.len() {
                check_action_suffix(&action_history(batch, b, t), &sc.actions, t).map_err(|e| {
                    Error::MalformedScenario {
                        name: sc.name.clone(),
                        reason: format!("{e} (patient {})", batch.ids[b]),
                    }
                })?;
            }
        }
        let mut outcomes = Vec::with_capacity(scenarios.len());
        for sc in scenarios {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trajectories = self.rollout_with(
                batch,
                t,
                &ActionMode::Fixed(sc.actions.clone()),
                k,
                &mut RngNoise(&mut rng),
            )?;
            let (mut sum, mut count) = (0.0, 0usize);
            for traj in &trajectories {
                let last = traj.scores.last().and_then(|s| s.samples.as_ref()).expect("final visit");
                sum += last.sum();
                count += last.len();
            }
            outcomes.push(ScenarioOutcome {
                name: sc.name.clone(),
                trajectories,
                final_mean: sum / count as f64,
            });
        }
        let deltas = outcomes
            .iter()
            .map(|a| outcomes.iter().map(|b| a.final_mean - b.final_mean).collect())
            .collect();
        Ok(SimulationOutcome {
            start: t,
            samples: k.max(1),
            seed,
            scenarios: outcomes,
            deltas,
        })
    }
}

/// Mean of the per-sample decoder means and the total predictive std
/// `sqrt(var_k(mean) + mean_k(std^2))` over the given rows.
fn predictive_moments(out: &Readout, rows: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let means = out.mean.slice(ndarray::s![rows.clone(), ..]).to_owned();
    let (mean, spread) = column_mean_std(&means);
    let k = rows.len() as f64;
    let std = spread
        .iter()
        .enumerate()
        .map(|(d, sd)| {
            let within = rows.clone().map(|r| out.std[[r, d]].powi(2)).sum::<f64>() / k;
            (sd * sd + within).sqrt()
        })
        .collect();
    (mean, std)
}

impl SequenceModel for Slvm {
    fn kind(&self) -> &'static str {
        "slvm"
    }

    fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn predict_one_step(
        &self,
        batch: &SequenceBatch,
        t: usize,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<OneStepPrediction>> {
        self.predict_one_step_with(batch, t, samples, &mut RngNoise(rng))
    }

    fn rollout(
        &self,
        batch: &SequenceBatch,
        t: usize,
        mode: &ActionMode,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<PredictionTrajectory>> {
        self.rollout_with(batch, t, mode, samples, &mut RngNoise(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::nn::{RecordingNoise, ZeroNoise};

    fn adherent_patient() -> SequenceBatch {
        let mut batch = random_batch(1, 3, 2, 0);
        batch.a.fill(1.0);
        batch.y.fill(1.0);
        batch
    }

    fn scenario(name: &str, actions: &[f64]) -> Scenario {
        Scenario {
            name: name.into(),
            actions: actions.to_vec(),
        }
    }

    #[test]
    fn one_step_with_frozen_noise_is_deterministic() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut base = RngNoise(&mut rng);
        let mut rec = RecordingNoise::new(&mut base);
        let a = model.predict_one_step_with(&batch, 2, 1, &mut rec).unwrap();
        let b = model.predict_one_step_with(&batch, 2, 1, &mut rec.into_replay()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(&p.adherence_prob)));
        assert!(model.predict_one_step_with(&batch, 0, 1, &mut ZeroNoise).is_err());
        assert!(model.predict_one_step_with(&batch, 6, 1, &mut ZeroNoise).is_err());
    }

    #[test]
    fn rollout_lengths() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(2, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let last = model.rollout_with(&batch, 5, &ActionMode::Inferred, 4, &mut RngNoise(&mut rng)).unwrap();
        assert_eq!(last[0].scores.len(), 1);
        assert_eq!(last[0].adherence.len(), 1);
        assert_eq!(last[0].scores[0].visit, 5);
        assert_eq!(last[0].scores[0].samples.as_ref().unwrap().dim(), (4, 2));
        let full = model.rollout_with(&batch, 1, &ActionMode::Inferred, 4, &mut RngNoise(&mut rng)).unwrap();
        assert_eq!(full[1].scores.len(), 5);
        assert_eq!(full[1].adherence[0].provenance, Provenance::Filtered);
        assert_eq!(full[1].adherence[1].provenance, Provenance::PriorRollout);
    }

    #[test]
    fn inferred_actions_are_absorbing() {
        // Push the adherence logit around zero so samples straddle the
        // threshold; once a sample stops, its continued fraction can only fall.
        let mut model = tiny_model(3, 2, 3);
        let id = model.params.find("adherence.logit.b").unwrap();
        model.params.get_mut(id).fill(0.0);
        let batch = random_batch(4, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trajs = model.rollout_with(&batch, 1, &ActionMode::Inferred, 64, &mut RngNoise(&mut rng)).unwrap();
        for traj in &trajs {
            let cont: Vec<f64> = traj.adherence.iter().map(|a| a.continued).collect();
            assert!(cont.windows(2).all(|w| w[1] <= w[0]), "{cont:?}");
        }
        // Observed withdrawal in the history forces every later action to 0.
        let withdrawn = (0..batch.len()).find(|&b| batch.a[[b, 1]] == 0.0).unwrap();
        let sub = batch.select(&[withdrawn]);
        let trajs = model.rollout_with(&sub, 3, &ActionMode::Inferred, 16, &mut RngNoise(&mut rng)).unwrap();
        assert!(trajs[0].adherence.iter().all(|a| a.continued == 0.0));
    }

    #[test]
    fn fixed_actions_must_respect_absorption() {
        let model = tiny_model(3, 2, 0);
        let batch = random_batch(1, 3, 2, 1);
        let bad = ActionMode::Fixed(vec![0.0, 1.0, 0.0]);
        let err = model.rollout_with(&batch, 3, &bad, 2, &mut ZeroNoise).unwrap_err();
        assert!(matches!(err, Error::AbsorptionViolation(_)), "{err}");
    }

    #[test]
    fn identical_scenarios_give_exactly_zero_delta() {
        let model = tiny_model(3, 2, 6);
        let batch = adherent_patient();
        let out = model
            .simulate_interventions(
                &batch,
                3,
                &[scenario("a", &[1.0, 1.0, 1.0]), scenario("b", &[1.0, 1.0, 1.0]), scenario("c", &[0.0, 0.0, 0.0])],
                32,
                77,
            )
            .unwrap();
        assert_eq!(out.deltas[0][1], 0.0);
        assert_eq!(out.deltas[1][0], 0.0);
        for i in 0..3 {
            assert_eq!(out.deltas[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(out.deltas[i][j], -out.deltas[j][i]);
            }
        }
        assert_ne!(out.deltas[0][2], 0.0);
    }

    #[test]
    fn malformed_scenario_is_named() {
        let model = tiny_model(3, 2, 6);
        let batch = adherent_patient();
        let err = model
            .simulate_interventions(&batch, 3, &[scenario("ok", &[1.0, 1.0, 0.0]), scenario("zigzag", &[0.0, 1.0, 0.0])], 4, 1)
            .unwrap_err();
        assert!(matches!(err, Error::MalformedScenario { ref name, .. } if name == "zigzag"), "{err}");
        let err = model.simulate_interventions(&batch, 3, &[scenario("short", &[1.0])], 4, 1).unwrap_err();
        assert!(matches!(err, Error::MalformedScenario { ref name, .. } if name == "short"));
        assert!(model.simulate_interventions(&batch, 3, &[], 4, 1).is_err());
    }

    #[test]
    fn denormalized_outputs_track_training_mean() {
        // With scores at the training mean (zero after normalization) an
        // untrained model predicts near the raw mean, within a few stds.
        let mut stats = NormalizationStats::identity_with_dims(3, 2);
        stats.score_mean = vec![4.0, 6.0];
        stats.score_std = vec![0.2, 0.2];
        let mut model = tiny_model(3, 2, 1);
        model.stats = stats;
        let mut batch = random_batch(1, 3, 2, 2);
        for x in &mut batch.x {
            x.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = model.predict_one_step_with(&batch, 2, 50, &mut RngNoise(&mut rng)).unwrap();
        assert!((pred[0].score_mean[0] - 4.0).abs() < 1.0, "{:?}", pred[0].score_mean);
        assert!((pred[0].score_mean[1] - 6.0).abs() < 1.0);
    }
}
