//! Initializing a scale-equivariant model from a conventional one.
//!
//! Inter-scale weights start at zero, so until the first scale-pool the
//! model is a set of disconnected per-scale networks; the smallest-scale
//! network is made identical to the source.

use crate::basis::ScaleBasis;
use crate::error::{shape_err, Error, Result};
use crate::network::{Layer, SiameseModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zeroes every weight with inter-scale index `j > 0`.
pub fn zero_inter_scale<T: Scalar>(model: &mut SiameseModel<T>) {
    for layer in &model.layers {
        let (w, per_j) = match layer {
            Layer::ScaleConv { weight, basis, .. } => (*weight, basis.num_functions()),
            Layer::Fast1x1 { weight } => (*weight, 1),
            _ => continue,
        };
        let t = &mut model.params[w].value;
        let i = t.shape()[2];
        for (q, v) in t.data_mut().iter_mut().enumerate() {
            if (q / per_j) % i != 0 {
                *v = T::zero();
            }
        }
    }
}

/// Coefficients whose σ = 1 synthesis reproduces `kernel` (`base × base`).
pub fn transfer_spatial_kernel<T: Scalar>(kernel: &Tensor<T>, basis: &ScaleBasis<T>) -> Result<Vec<T>> {
    let b = basis.base_size();
    if kernel.len() != b * b || (kernel.rank() >= 2 && kernel.shape()[kernel.rank() - 1] != b) {
        return shape_err(format!("kernel {:?} for a {}x{} basis", kernel.shape(), b, b));
    }
    basis.solve_coefficients(kernel.data())
}

/// Fast 1×1 weights `[O, C, I]` from a source `[O, C, 1, 1]` kernel.
pub fn copy_1x1<T: Scalar>(source: &Tensor<T>, c_in: usize, interscale: usize) -> Result<Tensor<T>> {
    let s = source.shape();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return shape_err(format!("source {:?} is not a 1x1 kernel", s));
    }
    if s[1] != c_in {
        return shape_err(format!("source has {} input channels, target {}", s[1], c_in));
    }
    let (o, c) = (s[0], s[1]);
    let mut out = Tensor::zeros(&[o, c, interscale]);
    for oo in 0..o {
        for cc in 0..c {
            out.set(&[oo, cc, 0], source.data()[oo * c + cc]);
        }
    }
    Ok(out)
}

/// Initializes `target` from `source` layer by layer.
pub fn transfer_model<T: Scalar>(source: &SiameseModel<T>, target: &mut SiameseModel<T>) -> Result<()> {
    if source.is_scale_equivariant() || !target.is_scale_equivariant() {
        return Err(Error::Correspondence("transfer goes from a conventional model to a scale-equivariant one".into()));
    }
    let src_layers: Vec<&Layer<T>> = source.layers.iter().collect();
    let tgt_layers: Vec<usize> = (0..target.layers.len()).filter(|&i| !matches!(target.layers[i], Layer::ScalePool)).collect();
    if src_layers.len() != tgt_layers.len() {
        return Err(Error::Correspondence(format!(
            "source has {} layers, target has {} non-pooling layers",
            src_layers.len(),
            tgt_layers.len()
        )));
    }
    for (si, &ti) in tgt_layers.iter().enumerate() {
        let src = src_layers[si];
        let tgt = target.layers[ti].clone();
        match (src, &tgt) {
            (Layer::Conv { weight: sw, stride: ss }, Layer::ScaleConv { weight: tw, basis, stride: ts }) => {
                if ss != ts {
                    return Err(Error::Correspondence(format!("layer {}: stride {} vs {}", si, ss, ts)));
                }
                let k = &source.params[*sw].value;
                let ks = k.shape();
                let tshape = target.params[*tw].value.shape().to_vec();
                if ks[0] != tshape[0] || ks[1] != tshape[1] || ks[2] != basis.base_size() || ks[3] != basis.base_size() {
                    return Err(Error::Correspondence(format!("layer {}: kernel {:?} vs weights {:?}", si, ks, tshape)));
                }
                let (o, c, i, n) = (tshape[0], tshape[1], tshape[2], tshape[3]);
                let plane = ks[2] * ks[3];
                let mut w = Tensor::zeros(&tshape);
                for oo in 0..o {
                    for cc in 0..c {
                        let src_off = (oo * c + cc) * plane;
                        let kernel = Tensor::new(vec![ks[2], ks[3]], k.data()[src_off..src_off + plane].to_vec())?;
                        let coeffs = transfer_spatial_kernel(&kernel, basis)?;
                        let dst = ((oo * c + cc) * i) * n;
                        w.data_mut()[dst..dst + n].copy_from_slice(&coeffs);
                    }
                }
                target.params[*tw].value = w;
            }
            (Layer::Conv { weight: sw, .. }, Layer::Fast1x1 { weight: tw }) => {
                let ts = target.params[*tw].value.shape().to_vec();
                let w = copy_1x1(&source.params[*sw].value, ts[1], ts[2])
                    .map_err(|e| Error::Correspondence(format!("layer {}: {}", si, e)))?;
                if w.shape() != ts.as_slice() {
                    return Err(Error::Correspondence(format!("layer {}: 1x1 shape {:?} vs {:?}", si, w.shape(), ts)));
                }
                target.params[*tw].value = w;
            }
            (
                Layer::BatchNorm { gamma: sg, beta: sb, mean: sm, var: sv },
                Layer::BatchNorm { gamma: tg, beta: tb, .. },
            ) => {
                if source.params[*sg].value.shape() != target.params[*tg].value.shape() {
                    return Err(Error::Correspondence(format!("layer {}: batchnorm width differs", si)));
                }
                target.params[*tg].value = source.params[*sg].value.clone();
                target.params[*tb].value = source.params[*sb].value.clone();
                // one set of statistics per channel serves every scale slice
                if let Layer::BatchNorm { mean, var, .. } = &mut target.layers[ti] {
                    *mean = sm.clone();
                    *var = sv.clone();
                }
            }
            (Layer::Relu, Layer::Relu) => {}
            (s, t) => {
                return Err(Error::Correspondence(format!("layer {}: no correspondence between {} and {}", si, s.name(), t.name())));
            }
        }
    }
    zero_inter_scale(target);
    target.params[target.gain].value = source.params[source.gain].value.clone();
    target.params[target.bias].value = source.params[source.bias].value.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ModelKind, interscale: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(kind);
        c.layers.iter_mut().for_each(|l| l.channels = 3);
        c.scale.interscale = interscale;
        c
    }

    #[test]
    fn zeroing_clears_upper_offsets_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SiameseModel::<f64>::random(&small(ModelKind::ScaleEquivariant, 2), &mut rng).unwrap();
        let before = m.params[0].value.clone();
        zero_inter_scale(&mut m);
        // lifting layer has I = 1 and is untouched
        assert_eq!(m.params[0].value, before);
        let Layer::ScaleConv { weight, .. } = m.layers[3].clone() else { panic!("layer 3") };
        let w = &m.params[weight].value;
        assert_eq!(w.shape()[2], 2);
        for o in 0..3 {
            for c in 0..3 {
                for n in 0..9 {
                    assert_eq!(w.at(&[o, c, 1, n]), 0.0);
                    assert_ne!(w.at(&[o, c, 0, n]), 0.0);
                }
            }
        }
    }

    #[test]
    fn basis_function_maps_to_unit_vector() {
        let b = ScaleBasis::<f64>::build(3, 2f64.sqrt(), 3).unwrap();
        let w = transfer_spatial_kernel(&b.function(0, 6).reshape(&[3, 3]).unwrap(), &b).unwrap();
        for (i, v) in w.iter().enumerate() {
            assert!((v - if i == 6 { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
        let z = transfer_spatial_kernel(&Tensor::zeros(&[3, 3]), &b).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(transfer_spatial_kernel(&Tensor::zeros(&[5, 5]), &b).is_err());
    }

    #[test]
    fn copy_1x1_places_slice_zero() {
        let src = Tensor::<f64>::from_fn(&[2, 3, 1, 1], |i| (i[0] * 3 + i[1]) as f64 + 1.0);
        let w = copy_1x1(&src, 3, 2).unwrap();
        assert_eq!(w.at(&[1, 2, 0]), 6.0);
        assert_eq!(w.at(&[1, 2, 1]), 0.0);
        assert_eq!(copy_1x1(&src, 3, 1).unwrap().data(), src.data());
        assert!(copy_1x1(&src, 4, 1).is_err());
    }

    #[test]
    fn zero_source_gives_zero_weights() {
        let src = SiameseModel::<f64>::build(&small(ModelKind::Baseline, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tgt = SiameseModel::<f64>::random(&small(ModelKind::ScaleEquivariant, 1), &mut rng).unwrap();
        transfer_model(&src, &mut tgt).unwrap();
        for l in &tgt.layers {
            if let Layer::ScaleConv { weight, .. } = l {
                assert!(tgt.params[*weight].value.max_abs() == 0.0);
            }
        }
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        let src = SiameseModel::<f64>::build(&small(ModelKind::Baseline, 1)).unwrap();
        let mut other = small(ModelKind::ScaleEquivariant, 1);
        other.layers.pop();
        let mut tgt = SiameseModel::<f64>::build(&other).unwrap();
        assert!(matches!(transfer_model(&src, &mut tgt), Err(Error::Correspondence(_))));
        let mut base = SiameseModel::<f64>::build(&small(ModelKind::Baseline, 1)).unwrap();
        assert!(transfer_model(&src, &mut base).is_err());
    }
}
