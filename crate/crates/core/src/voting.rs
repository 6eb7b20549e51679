//! Class-based weighted majority voting.
//!
//! Each model's vote for class `c` counts with that model's learned precision
//! on `c`. The weight table is filled at runtime from the models' observed
//! predictions, starting from a flat Laplace prior.

use std::io::{Read, Write};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::zoo::{ModelId, Zoo};

/// Source of per-(model, class) vote weights.
pub trait VoteWeights {
    fn weight(&self, model: ModelId, class: usize) -> f64;
}

/// Every vote counts the same; reduces weighted voting to plurality voting.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformWeights;

impl VoteWeights for UniformWeights {
    fn weight(&self, _: ModelId, _: usize) -> f64 {
        1.0
    }
}

impl<W: VoteWeights + ?Sized> VoteWeights for &W {
    fn weight(&self, model: ModelId, class: usize) -> f64 {
        (**self).weight(model, class)
    }
}

/// `L x M` table of per-class prediction counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightMatrix {
    num_classes: usize,
    num_models: usize,
    attempts: Vec<u32>,
    correct: Vec<u32>,
}

impl WeightMatrix {
    pub fn new(num_classes: usize, num_models: usize) -> Self {
        Self {
            num_classes,
            num_models,
            attempts: vec![0; num_classes * num_models],
            correct: vec![0; num_classes * num_models],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    fn cell(&self, model: ModelId, class: usize) -> usize {
        class * self.num_models + model.index()
    }

    pub fn attempts(&self, model: ModelId, class: usize) -> u32 {
        self.attempts[self.cell(model, class)]
    }

    pub fn correct(&self, model: ModelId, class: usize) -> u32 {
        self.correct[self.cell(model, class)]
    }

    /// Record that `model` answered `predicted` for a query whose label was `true_class`.
    pub fn update(&mut self, model: ModelId, predicted: usize, true_class: usize) {
        let cell = self.cell(model, predicted);
        self.attempts[cell] += 1;
        if predicted == true_class {
            self.correct[cell] += 1;
        }
    }

    /// Dump as CSV `class,model_id,attempts,correct`, skipping untouched cells.
    pub fn write_csv<W: Write>(&self, zoo: &Zoo, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["class", "model_id", "attempts", "correct"])?;
        for class in 0..self.num_classes {
            for model in zoo.models() {
                let attempts = self.attempts(model.id, class);
                if attempts == 0 {
                    continue;
                }
                writer.write_record([
                    class.to_string(),
                    model.key.clone(),
                    attempts.to_string(),
                    self.correct(model.id, class).to_string(),
                ])?;
            }
        }
        writer.flush().map_err(|e| Error::io("<weights>", e))?;
        Ok(())
    }

    /// Restore counters written by [`WeightMatrix::write_csv`].
    pub fn read_csv<R: Read>(zoo: &Zoo, num_classes: usize, input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            class: usize,
            model_id: String,
            attempts: u32,
            correct: u32,
        }
        let mut matrix = Self::new(num_classes, zoo.len());
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::parse("<weights>", line, "row", e.to_string()))?;
            let model = zoo
                .by_key(&row.model_id)
                .ok_or_else(|| Error::UnknownModel(row.model_id.clone()))?;
            if row.class >= num_classes || row.correct > row.attempts {
                return Err(Error::parse("<weights>", line, "class", "inconsistent counters"));
            }
            let cell = matrix.cell(model.id, row.class);
            matrix.attempts[cell] = row.attempts;
            matrix.correct[cell] = row.correct;
        }
        Ok(matrix)
    }
}

impl VoteWeights for WeightMatrix {
    /// Laplace-smoothed precision `(correct + 1) / (attempts + 2)`.
    fn weight(&self, model: ModelId, class: usize) -> f64 {
        let cell = self.cell(model, class);
        (f64::from(self.correct[cell]) + 1.0) / (f64::from(self.attempts[cell]) + 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteOutcome {
    pub winner: usize,
    /// Summed weight per voted class, ordered by class index.
    pub class_weights: Vec<(usize, f64)>,
    /// Most votes any single class received (unweighted).
    pub max_vote: usize,
    /// Two or more classes shared the top unweighted count.
    pub count_tie: bool,
}

/// Combine per-model predictions into one label.
///
/// Returns `None` for an empty prediction list. Ties on the weighted sum go to
/// the lowest class index.
pub fn weighted_vote<W: VoteWeights>(
    predictions: &[(ModelId, usize)],
    weights: &W,
) -> Option<VoteOutcome> {
    if predictions.is_empty() {
        return None;
    }
    // (class, weight sum, count); ensembles are small so a sorted vec beats a map
    let mut tally: Vec<(usize, f64, usize)> = Vec::with_capacity(predictions.len());
    for &(model, class) in predictions {
        let w = weights.weight(model, class);
        match tally.binary_search_by_key(&class, |t| t.0) {
            Ok(i) => {
                tally[i].1 += w;
                tally[i].2 += 1;
            }
            Err(i) => tally.insert(i, (class, w, 1)),
        }
    }
    let mut best = 0;
    for i in 1..tally.len() {
        if tally[i].1 > tally[best].1 {
            best = i;
        }
    }
    let max_vote = tally.iter().map(|t| t.2).max().unwrap_or(0);
    let count_tie = tally.iter().filter(|t| t.2 == max_vote).count() > 1;
    Some(VoteOutcome {
        winner: tally[best].0,
        class_weights: tally.iter().map(|t| (t.0, t.1)).collect(),
        max_vote,
        count_tie,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::BundledZoo;

    struct Table(Vec<Vec<f64>>);

    impl VoteWeights for Table {
        fn weight(&self, model: ModelId, class: usize) -> f64 {
            self.0[model.index()][class]
        }
    }

    fn m(i: u16) -> ModelId {
        ModelId(i)
    }

    #[test]
    fn unanimous_vote_wins_regardless_of_weights() {
        let w = Table(vec![vec![0.01; 10], vec![0.9; 10], vec![0.3; 10]]);
        let out = weighted_vote(&[(m(0), 7), (m(1), 7), (m(2), 7)], &w).unwrap();
        assert_eq!(out.winner, 7);
        assert_eq!(out.max_vote, 3);
        assert!(!out.count_tie);
    }

    #[test]
    fn heavier_minority_breaks_count_tie() {
        // A = class 0 with weights 0.30 + 0.30, B = class 1 with 0.40 + 0.35
        let w = Table(vec![
            vec![0.30, 0.0],
            vec![0.30, 0.0],
            vec![0.0, 0.40],
            vec![0.0, 0.35],
        ]);
        let out = weighted_vote(&[(m(0), 0), (m(1), 0), (m(2), 1), (m(3), 1)], &w).unwrap();
        assert_eq!(out.winner, 1);
        assert!(out.count_tie);
        assert_eq!(out.max_vote, 2);
        assert!((out.class_weights[0].1 - 0.60).abs() < 1e-12);
        assert!((out.class_weights[1].1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_reduce_to_majority() {
        let votes = [(m(0), 4), (m(1), 4), (m(2), 4), (m(3), 2), (m(4), 2)];
        assert_eq!(weighted_vote(&votes, &UniformWeights).unwrap().winner, 4);
    }

    #[test]
    fn weight_ties_go_to_lowest_class() {
        let votes = [(m(0), 9), (m(1), 3)];
        assert_eq!(weighted_vote(&votes, &UniformWeights).unwrap().winner, 3);
        assert!(weighted_vote(&[], &UniformWeights).is_none());
    }

    #[test]
    fn smoothing_rule() {
        let mut w = WeightMatrix::new(5, 2);
        assert_eq!(w.weight(m(0), 3), 0.5);
        w.update(m(0), 3, 3);
        assert!((w.weight(m(0), 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(w.weight(m(1), 3), 0.5);

        let mut w = WeightMatrix::new(2, 1);
        for i in 0..100 {
            w.update(m(0), 1, if i == 0 { 0 } else { 1 });
        }
        assert!((w.weight(m(0), 1) - 100.0 / 102.0).abs() < 1e-15);
        assert_eq!(w.attempts(m(0), 1), 100);
        assert_eq!(w.correct(m(0), 1), 99);
    }

    #[test]
    fn csv_dump_restores_counters() {
        let zoo = Zoo::bundled(BundledZoo::Imagenet);
        let mut w = WeightMatrix::new(20, zoo.len());
        for q in 0..500usize {
            w.update(ModelId((q % 11) as u16), q % 20, (q * 3) % 20);
        }
        let mut buf = Vec::new();
        w.write_csv(&zoo, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("class,model_id,attempts,correct\n"));
        assert_eq!(WeightMatrix::read_csv(&zoo, 20, buf.as_slice()).unwrap(), w);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn votes() -> impl Strategy<Value = Vec<(ModelId, usize)>> {
            proptest::collection::vec(0usize..4, 1..=5).prop_map(|classes| {
                classes
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| (ModelId(i as u16), c))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn argmax_is_scale_invariant(
                v in votes(),
                table in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 5),
                lambda in 0.01f64..100.0,
            ) {
                let scaled: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|w| w * lambda).collect()).collect();
                let a = weighted_vote(&v, &Table(table)).unwrap();
                let b = weighted_vote(&v, &Table(scaled)).unwrap();
                prop_assert_eq!(a.winner, b.winner);
            }

            #[test]
            fn weights_stay_inside_unit_interval(
                updates in proptest::collection::vec((0u16..3, 0usize..4, 0usize..4), 0..300),
            ) {
                let mut w = WeightMatrix::new(4, 3);
                for (model, pred, truth) in updates {
                    w.update(ModelId(model), pred, truth);
                }
                for model in 0..3 {
                    for class in 0..4 {
                        let x = w.weight(ModelId(model), class);
                        prop_assert!(x > 0.0 && x < 1.0);
                    }
                }
            }
        }

        #[test]
        fn uniform_weights_equal_plain_majority_exhaustively() {
            // every vote vector with N <= 5 models over L <= 4 classes
            for n in 1..=5u32 {
                for l in 1..=4u32 {
                    for code in 0..l.pow(n) {
                        let v: Vec<(ModelId, usize)> = (0..n)
                            .map(|i| (ModelId(i as u16), ((code / l.pow(i)) % l) as usize))
                            .collect();
                        let mut counts = vec![0u32; l as usize];
                        for &(_, c) in &v {
                            counts[c] += 1;
                        }
                        let top = *counts.iter().max().unwrap();
                        if top * 2 <= n {
                            continue; // no strict majority
                        }
                        let majority = counts.iter().position(|&c| c == top).unwrap();
                        assert_eq!(weighted_vote(&v, &UniformWeights).unwrap().winner, majority);
                    }
                }
            }
        }
    }
}
