use crate::error::{Error, Result};
use crate::numkit::{Matrix, Scalar};

use super::{Layout, ModuleSpec};

/// One low-rank update `ΔW = α·B·A` for a frozen `m × n` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule<T> {
    pub placement: String,
    /// `r × n`.
    pub a: Matrix<T>,
    /// `m × r`.
    pub b: Matrix<T>,
    pub alpha: T,
}

impl<T: Scalar> LoraModule<T> {
    pub fn new(placement: impl Into<String>, a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self> {
        let placement = placement.into();
        let r = a.rows();
        if r == 0 || b.cols() != r || r > b.rows().min(a.cols()) {
            return Err(Error::Layout(format!(
                "{placement}: A is {:?}, B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { placement, a, b, alpha })
    }

    pub fn zeros(spec: &ModuleSpec) -> Self {
        Self {
            placement: spec.placement.clone(),
            a: Matrix::zeros(spec.r, spec.n),
            b: Matrix::zeros(spec.m, spec.r),
            alpha: T::lit(spec.alpha),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn spec(&self) -> ModuleSpec {
        ModuleSpec {
            placement: self.placement.clone(),
            m: self.b.rows(),
            n: self.a.cols(),
            r: self.rank(),
            alpha: self.alpha.as_f64(),
        }
    }

    /// Dense `α·B·A`. Only for checks and reporting; the forward path uses
    /// the factored form.
    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul_unchecked(&self.a).scale(self.alpha)
    }
}

/// `W₀·x + α·B·(A·x)` for column-batched `x` (`n × batch`).
pub fn apply_lora<T: Scalar>(w0: &Matrix<T>, module: &LoraModule<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if w0.rows() != module.b.rows() || w0.cols() != module.a.cols() {
        return Err(Error::shape(format!(
            "{}: base weight {:?} does not match adapter {}x{}",
            module.placement,
            w0.shape(),
            module.b.rows(),
            module.a.cols()
        )));
    }
    let base = w0.matmul(x)?;
    let update = module.b.matmul(&module.a.matmul(x)?)?;
    Ok(base.zip_map(&update, |h, u| h + module.alpha * u))
}

/// Every adapter module of one model, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    layout: Layout,
    modules: Vec<LoraModule<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn new(modules: Vec<LoraModule<T>>) -> Result<Self> {
        let layout = Layout::new(modules.iter().map(LoraModule::spec).collect())?;
        Ok(Self { layout, modules })
    }

    pub fn zeros(layout: &Layout) -> Self {
        Self {
            layout: layout.clone(),
            modules: layout.modules.iter().map(LoraModule::zeros).collect(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn modules(&self) -> &[LoraModule<T>] {
        &self.modules
    }

    pub fn module(&self, placement: &str) -> Option<&LoraModule<T>> {
        self.modules.iter().find(|m| m.placement == placement)
    }

    pub fn is_finite(&self) -> bool {
        self.modules.iter().all(|m| m.a.is_finite() && m.b.is_finite())
    }
}

/// Concatenates each module's A then B (both row-major), modules in layout
/// order.
pub fn flatten<T: Scalar>(set: &AdapterSet<T>) -> (Vec<T>, Layout) {
    let mut out = Vec::with_capacity(set.layout.total_len());
    for m in &set.modules {
        out.extend_from_slice(m.a.data());
        out.extend_from_slice(m.b.data());
    }
    (out, set.layout.clone())
}

/// Structural inverse of [`flatten`].
pub fn unflatten<T: Scalar>(vec: &[T], layout: &Layout) -> Result<AdapterSet<T>> {
    if vec.len() != layout.total_len() {
        return Err(Error::Layout(format!(
            "vector of length {} for layout of length {}",
            vec.len(),
            layout.total_len()
        )));
    }
    let mut modules = Vec::with_capacity(layout.modules.len());
    let mut at = 0;
    for spec in &layout.modules {
        let na = spec.r * spec.n;
        let nb = spec.m * spec.r;
        let a = Matrix::new(spec.r, spec.n, vec[at..at + na].to_vec())?;
        let b = Matrix::new(spec.m, spec.r, vec[at + na..at + na + nb].to_vec())?;
        at += na + nb;
        modules.push(LoraModule {
            placement: spec.placement.clone(),
            a,
            b,
            alpha: T::lit(spec.alpha),
        });
    }
    Ok(AdapterSet {
        layout: layout.clone(),
        modules,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_a_or_alpha_leaves_base_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = random(4, 3, &mut rng);
        let x = random(3, 5, &mut rng);
        let base = w0.matmul(&x).unwrap();
        let m = LoraModule::new("p", Matrix::zeros(2, 3), random(4, 2, &mut rng), 1.5).unwrap();
        assert_eq!(apply_lora(&w0, &m, &x).unwrap(), base);
        let m = LoraModule::new("p", random(2, 3, &mut rng), random(4, 2, &mut rng), 0.0).unwrap();
        assert_eq!(apply_lora(&w0, &m, &x).unwrap(), base);
    }

    #[test]
    fn factored_matches_dense_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w0 = random(4, 4, &mut rng);
            let x = random(4, 3, &mut rng);
            let m = LoraModule::new("p", random(2, 4, &mut rng), random(4, 2, &mut rng), 0.7).unwrap();
            // dense oracle: (W0 + αBA)x with explicit loops
            let mut w = w0.clone();
            for i in 0..4 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for k in 0..2 {
                        s += m.b.get(i, k) * m.a.get(k, j);
                    }
                    w.set(i, j, w.get(i, j) + 0.7 * s);
                }
            }
            let dense = w.matmul(&x).unwrap();
            let fact = apply_lora(&w0, &m, &x).unwrap();
            for (a, b) in fact.data().iter().zip(dense.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = LoraModule::<f32>::new("p", Matrix::zeros(1, 3), Matrix::zeros(2, 1), 1.0).unwrap();
        assert!(apply_lora(&Matrix::zeros(2, 4), &m, &Matrix::zeros(4, 1)).is_err());
        assert!(LoraModule::<f32>::new("p", Matrix::zeros(2, 3), Matrix::zeros(2, 1), 1.0).is_err());
    }

    #[test]
    fn smallest_flatten() {
        let m = LoraModule::new(
            "p",
            Matrix::row_vector(vec![3.0_f32]),
            Matrix::row_vector(vec![-4.0]),
            1.0,
        )
        .unwrap();
        let set = AdapterSet::new(vec![m]).unwrap();
        let (v, layout) = flatten(&set);
        assert_eq!(v, vec![3.0, -4.0]);
        assert_eq!(unflatten(&v, &layout).unwrap(), set);
    }

    #[test]
    fn two_module_length_matches_layout_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = LoraModule::new("q", random(2, 5, &mut rng), random(3, 2, &mut rng), 1.0).unwrap();
        let b = LoraModule::new("v", random(1, 4, &mut rng), random(6, 1, &mut rng), 2.0).unwrap();
        let set = AdapterSet::new(vec![a, b]).unwrap();
        let (v, layout) = flatten(&set);
        assert_eq!(v.len(), 2 * (3 + 5) + (6 + 4));
        assert_eq!(v.len(), layout.total_len());
    }

    #[test]
    fn zero_vector_and_truncation() {
        let layout = Layout::default();
        let set = unflatten(&vec![0.0_f32; 384], &layout).unwrap();
        assert_eq!(set, AdapterSet::zeros(&layout));
        assert!(matches!(unflatten(&vec![0.0_f32; 383], &layout), Err(Error::Layout(_))));
    }

    #[test]
    fn duplicate_placements_rejected() {
        let m = LoraModule::<f32>::new("p", Matrix::zeros(1, 2), Matrix::zeros(2, 1), 1.0).unwrap();
        assert!(AdapterSet::new(vec![m.clone(), m]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_are_inverse(v in proptest::collection::vec(-1e3f32..1e3, 2 * (4 + 3) + (2 + 5))) {
            let layout = Layout::new(vec![
                ModuleSpec { placement: "a".into(), m: 4, n: 3, r: 2, alpha: 1.0 },
                ModuleSpec { placement: "b".into(), m: 2, n: 5, r: 1, alpha: 0.5 },
            ]).unwrap();
            let set = unflatten(&v, &layout).unwrap();
            let (back, l2) = flatten(&set);
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(&l2, &layout);
            prop_assert_eq!(unflatten(&back, &l2).unwrap(), set);
        }
    }
}
