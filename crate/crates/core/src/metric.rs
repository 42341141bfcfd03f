//! Triplet regularization with source features as anchor, target as positive
//! and auxiliary as negative.
//!
//! `d` is the mean squared element-wise difference, so the default margin of
//! 1.0 means the same thing regardless of feature width.

use ndarray::{ArrayD, ArrayViewD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Source, target and auxiliary images correspond pixel to pixel.
    Aligned,
    /// No correspondence; the object-level triplet is unavailable.
    Unaligned,
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignmentMode::Aligned => "aligned",
            AlignmentMode::Unaligned => "unaligned",
        })
    }
}

pub fn feature_distance(a: ArrayViewD<f64>, b: ArrayViewD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("feature shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    Zip::from(&a).and(&b).for_each(|x, y| sum += (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

/// Anchor (source), positive (target) and negative (auxiliary) features of
/// identical shape. For the object level the first axis indexes proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFeatures {
    pub anchor: ArrayD<f64>,
    pub positive: ArrayD<f64>,
    pub negative: ArrayD<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub anchor: ArrayD<f64>,
    pub positive: ArrayD<f64>,
    pub negative: ArrayD<f64>,
}

impl TripletFeatures {
    pub fn new(anchor: ArrayD<f64>, positive: ArrayD<f64>, negative: ArrayD<f64>, margin: f64) -> Result<Self> {
        if anchor.shape() != positive.shape() || anchor.shape() != negative.shape() {
            return Err(Error::Contract(format!(
                "triplet members must share a shape: {:?}, {:?}, {:?}",
                anchor.shape(),
                positive.shape(),
                negative.shape()
            )));
        }
        if !(margin > 0.0) {
            return Err(Error::InvalidInput(format!("triplet margin must be positive, got {margin}")));
        }
        Ok(Self { anchor, positive, negative, margin })
    }
}

/// `max(d_pos - d_neg + margin, 0)`.
pub fn hinge_value(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Hinge on one (anchor, positive, negative) slice; returns the loss and, if
/// active, the gradients scaled by `scale`.
fn hinge(
    a: ArrayViewD<f64>,
    p: ArrayViewD<f64>,
    n: ArrayViewD<f64>,
    margin: f64,
    scale: f64,
    grad: Option<(&mut ArrayD<f64>, &mut ArrayD<f64>, &mut ArrayD<f64>)>,
) -> f64 {
    let d_ap = feature_distance(a.view(), p.view()).expect("shapes checked");
    let d_an = feature_distance(a.view(), n.view()).expect("shapes checked");
    let value = hinge_value(d_ap, d_an, margin);
    if value == 0.0 {
        return 0.0;
    }
    if let Some((ga, gp, gn)) = grad {
        let k = 2.0 * scale / a.len() as f64;
        Zip::from(ga).and(gp).and(gn).and(&a).and(&p).and(&n).for_each(|ga, gp, gn, &a, &p, &n| {
            *ga += k * ((a - p) - (a - n));
            *gp -= k * (a - p);
            *gn += k * (a - n);
        });
    }
    value
}

/// `max(d(S, T) - d(S, A) + margin, 0)` over whole feature maps.
pub fn image_triplet_loss(t: &TripletFeatures) -> f64 {
    hinge(t.anchor.view(), t.positive.view(), t.negative.view(), t.margin, 1.0, None)
}

pub fn image_triplet_loss_with_grad(t: &TripletFeatures) -> (f64, TripletGrad) {
    let mut g = zero_grad(t);
    let loss = hinge(
        t.anchor.view(),
        t.positive.view(),
        t.negative.view(),
        t.margin,
        1.0,
        Some((&mut g.anchor, &mut g.positive, &mut g.negative)),
    );
    (loss, g)
}

fn zero_grad(t: &TripletFeatures) -> TripletGrad {
    let z = ArrayD::zeros(t.anchor.raw_dim());
    TripletGrad { anchor: z.clone(), positive: z.clone(), negative: z }
}

/// Mean over proposals (rows along axis 0) of the per-proposal hinge. Zero
/// proposals give 0.
pub fn object_triplet_loss(t: &TripletFeatures, mode: AlignmentMode) -> Result<f64> {
    Ok(object_triplet_loss_impl(t, mode, false)?.0)
}

pub fn object_triplet_loss_with_grad(t: &TripletFeatures, mode: AlignmentMode) -> Result<(f64, TripletGrad)> {
    let (loss, g) = object_triplet_loss_impl(t, mode, true)?;
    Ok((loss, g.expect("requested")))
}

fn object_triplet_loss_impl(
    t: &TripletFeatures,
    mode: AlignmentMode,
    with_grad: bool,
) -> Result<(f64, Option<TripletGrad>)> {
    if mode == AlignmentMode::Unaligned {
        return Err(Error::Mode {
            mode: mode.to_string(),
            reason: "the object-level triplet needs pixel-aligned proposals".into(),
        });
    }
    if t.anchor.ndim() < 2 {
        return Err(Error::Contract("object features need a proposal axis and a feature axis".into()));
    }
    let mut grad = with_grad.then(|| zero_grad(t));
    let m = t.anchor.len_of(Axis(0));
    if m == 0 {
        log::debug!("object triplet over zero proposals");
        return Ok((0.0, grad));
    }
    let scale = 1.0 / m as f64;
    let mut total = 0.0;
    for j in 0..m {
        let row = |x: &ArrayD<f64>| x.index_axis(Axis(0), j).to_owned();
        let views = (row(&t.anchor), row(&t.positive), row(&t.negative));
        let value = match grad.as_mut() {
            Some(g) => {
                let mut ga = ArrayD::zeros(views.0.raw_dim());
                let mut gp = ga.clone();
                let mut gn = ga.clone();
                let v = hinge(views.0.view(), views.1.view(), views.2.view(), t.margin, scale, Some((&mut ga, &mut gp, &mut gn)));
                g.anchor.index_axis_mut(Axis(0), j).assign(&ga);
                g.positive.index_axis_mut(Axis(0), j).assign(&gp);
                g.negative.index_axis_mut(Axis(0), j).assign(&gn);
                v
            }
            None => hinge(views.0.view(), views.1.view(), views.2.view(), t.margin, scale, None),
        };
        total += value;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayD, IxDyn};
    use proptest::prelude::*;

    fn dy(v: ndarray::Array2<f64>) -> ArrayD<f64> {
        v.into_dyn()
    }

    #[test]
    fn distance_examples() {
        let a = array![[0.0, 0.0]].into_dyn();
        let b = array![[3.0, 4.0]].into_dyn();
        assert_eq!(feature_distance(a.view(), b.view()).unwrap(), 12.5);
        assert_eq!(feature_distance(a.view(), a.view()).unwrap(), 0.0);
        let c = array![[1.5, -2.0, 0.25]].into_dyn();
        assert_eq!(feature_distance(c.view(), c.mapv(|v| v + 1.0).view()).unwrap(), 1.0);
        assert!(matches!(feature_distance(a.view(), c.view()), Err(Error::Contract(_))));
    }

    /// A one-element triplet with d(S,T) = st and d(S,A) = sa.
    fn scalar_triplet(st: f64, sa: f64) -> TripletFeatures {
        let s = ArrayD::zeros(IxDyn(&[1]));
        TripletFeatures::new(s, ArrayD::from_elem(IxDyn(&[1]), st.sqrt()), ArrayD::from_elem(IxDyn(&[1]), sa.sqrt()), 1.0)
            .unwrap()
    }

    #[test]
    fn image_hinge_examples() {
        assert_eq!(image_triplet_loss(&scalar_triplet(0.2, 1.5)), 0.0);
        assert!((image_triplet_loss(&scalar_triplet(0.9, 0.4)) - 1.5).abs() < 1e-12);
        let s = array![[0.3, 0.1], [0.2, -0.5]].into_dyn();
        let t = array![[1.0, 0.0], [0.0, 1.0]].into_dyn();
        let equal = TripletFeatures::new(s, t.clone(), t, 1.0).unwrap();
        assert_eq!(image_triplet_loss(&equal), 1.0);
    }

    #[test]
    fn object_hinge_examples() {
        let x = dy(array![[0.1, 0.2], [0.3, 0.4]]);
        let same = TripletFeatures::new(x.clone(), x.clone(), x.clone(), 1.0).unwrap();
        assert_eq!(object_triplet_loss(&same, AlignmentMode::Aligned).unwrap(), 1.0);
        // rows: (d_st, d_sa) = (0, 4) -> 0, (0, 1) -> 0, (1, 0.5) -> 1.5
        let anchor = dy(array![[0.0], [0.0], [0.0]]);
        let positive = dy(array![[0.0], [0.0], [1.0]]);
        let negative = dy(array![[2.0], [1.0], [0.5f64.sqrt()]]);
        let t = TripletFeatures::new(anchor, positive, negative, 1.0).unwrap();
        assert!((object_triplet_loss(&t, AlignmentMode::Aligned).unwrap() - 0.5).abs() < 1e-12);
        let empty = TripletFeatures::new(
            ArrayD::zeros(IxDyn(&[0, 4])),
            ArrayD::zeros(IxDyn(&[0, 4])),
            ArrayD::zeros(IxDyn(&[0, 4])),
            1.0,
        )
        .unwrap();
        assert_eq!(object_triplet_loss(&empty, AlignmentMode::Aligned).unwrap(), 0.0);
    }

    #[test]
    fn unaligned_mode_is_rejected() {
        let x = dy(array![[0.1]]);
        let t = TripletFeatures::new(x.clone(), x.clone(), x, 1.0).unwrap();
        assert!(matches!(object_triplet_loss(&t, AlignmentMode::Unaligned), Err(Error::Mode { .. })));
    }

    #[test]
    fn construction_checks() {
        let a = ArrayD::zeros(IxDyn(&[2]));
        assert!(TripletFeatures::new(a.clone(), ArrayD::zeros(IxDyn(&[3])), a.clone(), 1.0).is_err());
        assert!(TripletFeatures::new(a.clone(), a.clone(), a, 0.0).is_err());
    }

    fn fd_check(t: &TripletFeatures, object: bool) {
        let loss = |t: &TripletFeatures| {
            if object {
                object_triplet_loss(t, AlignmentMode::Aligned).unwrap()
            } else {
                image_triplet_loss(t)
            }
        };
        let g = if object {
            object_triplet_loss_with_grad(t, AlignmentMode::Aligned).unwrap().1
        } else {
            image_triplet_loss_with_grad(t).1
        };
        let eps = 1e-6;
        for member in 0..3 {
            let analytic = [&g.anchor, &g.positive, &g.negative][member];
            for idx in 0..t.anchor.len() {
                let bump = |delta: f64| {
                    let mut u = t.clone();
                    let m = [&mut u.anchor, &mut u.positive, &mut u.negative];
                    let arr = m.into_iter().nth(member).unwrap();
                    arr.as_slice_mut().unwrap()[idx] += delta;
                    loss(&u)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6), "member {member} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = dy(array![[0.3, -0.2, 0.1], [1.0, 0.5, -0.5]]);
        let p = dy(array![[0.6, 0.2, 0.0], [0.2, 0.1, 0.4]]);
        let n = dy(array![[0.4, -0.1, 0.3], [3.0, 2.0, 1.0]]);
        let t = TripletFeatures::new(a, p, n, 1.0).unwrap();
        fd_check(&t, false);
        fd_check(&t, true);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20)) {
            let a = ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(|x| x.0).collect()).unwrap();
            let b = ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(|x| x.1).collect()).unwrap();
            prop_assert_eq!(feature_distance(a.view(), b.view()).unwrap(), feature_distance(b.view(), a.view()).unwrap());
        }

        #[test]
        fn zero_loss_means_ordering_holds_and_zero_gradient(
            v in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 1..10)
        ) {
            let mk = |f: fn(&(f64, f64, f64)) -> f64| ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(f).collect()).unwrap();
            let t = TripletFeatures::new(mk(|x| x.0), mk(|x| x.1), mk(|x| x.2), 1.0).unwrap();
            let (loss, g) = image_triplet_loss_with_grad(&t);
            let d_st = feature_distance(t.anchor.view(), t.positive.view()).unwrap();
            let d_sa = feature_distance(t.anchor.view(), t.negative.view()).unwrap();
            prop_assert_eq!(loss == 0.0, d_st + 1.0 <= d_sa);
            if loss == 0.0 {
                prop_assert!(g.anchor.iter().chain(g.positive.iter()).chain(g.negative.iter()).all(|&x| x == 0.0));
            }
            prop_assert!(loss >= 0.0);
        }
    }
}
