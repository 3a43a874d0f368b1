//! Operation counters for one gradient pass and one DE individual update.
//!
//! Multiply-adds inside dense and convolution kernels are the basic unit;
//! activation evaluations are counted separately. Convolutions count as
//! their unrolled dense equivalent, `K·C·kh·kw` madds per output position.

use serde::{Deserialize, Serialize};

use crate::de::{update_counted, DeConfig, Population};
use crate::network::{backward_counted, init_params, LayerSpec, NetworkError, NetworkSpec, ParamVector};
use crate::rng::{tag, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCounter {
    /// Parameter count.
    pub d: usize,
    /// Input size followed by the output size of every parameterized layer.
    pub layer_sizes: Vec<usize>,
    /// `Σ l_i·l_{i+1}` with convolutions unrolled.
    pub sum_layer_products: u64,
    /// `Σ l_i`.
    pub sum_layer_sizes: u64,

    /// Instrumented madds of one forward pass on one sample.
    pub forward_madds: u64,
    /// Instrumented madds of the matching backward pass.
    pub backward_madds: u64,
    pub forward_activations: u64,
    pub backward_activations: u64,
    /// Closed-form backward madds: weight gradients plus input gradients
    /// for every parameterized layer that is not the first layer.
    pub backward_madds_closed: u64,

    /// Slots written by one mutation.
    pub de_mutation_touches: u64,
    /// Slots copied from the mutant by one crossover (at most `d`).
    pub de_crossover_touches: u64,
    /// Fitness comparisons in one selection.
    pub de_comparisons: u64,

    pub n_g: u64,
    pub n_e: u64,
    pub m: u64,
    /// `n_g · (forward + backward)` madds.
    pub bp_total_madds: u64,
    /// `n_e · m · (mutation + crossover + comparisons)`.
    pub de_total_update_ops: u64,
    /// Forward madds spent on fitness, per evaluation sample: `n_e · m · forward`.
    pub de_total_fitness_madds: u64,
}

impl CostCounter {
    /// Slot touches of one DE individual update.
    pub fn de_update_ops(&self) -> u64 {
        self.de_mutation_touches + self.de_crossover_touches + self.de_comparisons
    }

    /// Forward madds per sample over DE mutation touches per individual.
    pub fn madds_per_touch(&self) -> f64 {
        self.forward_madds as f64 / self.de_mutation_touches as f64
    }

    /// `Σ l_i·l_{i+1} / Σ l_i`.
    pub fn closed_form_ratio(&self) -> f64 {
        self.sum_layer_products as f64 / self.sum_layer_sizes as f64
    }

    pub fn render(&self) -> String {
        format!(
            "d = {}\nlayer sizes = {:?}\nsum l_i*l_(i+1) = {}\nsum l_i = {}\n\
             forward madds/sample = {}\nbackward madds/sample = {}\nactivations fwd/bwd = {}/{}\n\
             DE update: mutation {} + crossover {} + comparisons {} = {}\n\
             BP total (n_g={}) = {} madds\nDE update total (n_e={}, m={}) = {} ops\n\
             DE fitness total = {} madds per evaluation sample\n\
             forward madds / mutation touches = {:.4}\nsum l_i*l_(i+1) / sum l_i = {:.4}\n",
            self.d,
            self.layer_sizes,
            self.sum_layer_products,
            self.sum_layer_sizes,
            self.forward_madds,
            self.backward_madds,
            self.forward_activations,
            self.backward_activations,
            self.de_mutation_touches,
            self.de_crossover_touches,
            self.de_comparisons,
            self.de_update_ops(),
            self.n_g,
            self.bp_total_madds,
            self.n_e,
            self.m,
            self.de_total_update_ops,
            self.de_total_fitness_madds,
            self.madds_per_touch(),
            self.closed_form_ratio(),
        )
    }
}

/// Unrolled madds of every parameterized layer, in layer order, with the
/// layer index.
fn layer_products(spec: &NetworkSpec) -> Vec<(usize, u64)> {
    spec.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match *l {
            LayerSpec::Dense { inputs, outputs } => Some((i, (inputs * outputs) as u64)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel: [kh, kw],
                ..
            } => {
                let o = spec.output_shape(i);
                Some((i, (out_channels * in_channels * kh * kw * o[1] * o[2]) as u64))
            }
            _ => None,
        })
        .collect()
}

/// Instruments one gradient pass and one DE update for `spec`.
pub fn count_costs(spec: &NetworkSpec, n_g: u64, n_e: u64, m: usize) -> Result<CostCounter, NetworkError> {
    let rng = RngStream::new(0).child(tag::COST);
    let params: ParamVector<f32> = init_params(spec, &rng.child(tag::INIT));
    let shape: Vec<usize> = std::iter::once(1).chain(spec.input_shape().iter().copied()).collect();
    let sample = Tensor::full(&shape, 0.5f32);
    let (_, _, fwd, bwd) = backward_counted(spec, &params, &sample, &[0], 0.0)?;

    let products = layer_products(spec);
    let mut layer_sizes = vec![spec.input_len()];
    for &(i, _) in &products {
        layer_sizes.push(spec.output_shape(i).iter().product());
    }
    let backward_madds_closed = products.iter().map(|&(i, p)| if i > 0 { 2 * p } else { p }).sum();

    let m = m.max(4);
    let members = (0..m)
        .map(|k| init_params(spec, &rng.derive(&[tag::SEED_POP, k as u64])))
        .collect();
    let mut pop = Population::new(members).expect("m >= 4 members of one spec");
    pop.fitness.iter_mut().for_each(|f| *f = 0.0);
    let cfg = DeConfig {
        f: 0.5,
        cr: 0.5,
        ..DeConfig::default()
    };
    let (_, upd) = update_counted(&pop, 0, &cfg, &mut rng.child(tag::DE).rng(), |_| 1.0).expect("valid population");

    let update_ops = upd.mutation + upd.crossover + upd.comparisons;
    Ok(CostCounter {
        d: params.len(),
        sum_layer_products: products.iter().map(|p| p.1).sum(),
        sum_layer_sizes: layer_sizes.iter().map(|&l| l as u64).sum(),
        layer_sizes,
        forward_madds: fwd.madds,
        backward_madds: bwd.madds,
        forward_activations: fwd.activations,
        backward_activations: bwd.activations,
        backward_madds_closed,
        de_mutation_touches: upd.mutation,
        de_crossover_touches: upd.crossover,
        de_comparisons: upd.comparisons,
        n_g,
        n_e,
        m: m as u64,
        bp_total_madds: n_g * (fwd.madds + bwd.madds),
        de_total_update_ops: n_e * m as u64 * update_ops,
        de_total_fitness_madds: n_e * m as u64 * fwd.madds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::zoo::builtin;

    #[test]
    fn mlp_closed_forms() {
        let c = count_costs(&builtin("mlp").unwrap(), 3, 5, 10).unwrap();
        assert_eq!(c.d, 101_770);
        assert_eq!(c.layer_sizes, vec![784, 128, 10]);
        assert_eq!(c.forward_madds, 784 * 128 + 128 * 10);
        assert_eq!(c.backward_madds, 2 * 128 * 10 + 784 * 128);
        assert_eq!(c.de_mutation_touches, 101_770);
        assert!(c.de_crossover_touches <= 101_770);
        assert_eq!(c.de_comparisons, 1);
        assert_eq!(c.bp_total_madds, 3 * (c.forward_madds + c.backward_madds));
        assert!((c.closed_form_ratio() - 101_632.0 / 922.0).abs() < 1e-9);
    }

    #[test]
    fn zoo_counters_match_closed_forms() {
        for name in ["mlp", "lenet1", "lenet5", "lenet5_rgb"] {
            let c = count_costs(&builtin(name).unwrap(), 1, 1, 10).unwrap();
            assert_eq!(c.forward_madds, c.sum_layer_products, "{name}");
            assert_eq!(c.backward_madds, c.backward_madds_closed, "{name}");
            assert_eq!(c.de_mutation_touches, c.d as u64, "{name}");
        }
    }
}
