//! Per-sample Hessian ensembles split into retain and forget sets, and their
//! plain-text file format.
//!
//! # File format
//!
//! Whitespace-separated decimal tokens; blank lines and lines starting with
//! `#` are ignored.
//!
//! Dense ensembles start with the header `d n_r n_f`, followed by `n_r + n_f`
//! blocks of `d * d` entries each (row-major), retain blocks first.
//!
//! Rank-one ensembles start with `RANK1 d n_r n_f`, followed by `n_r + n_f`
//! records of `weight v_1 ... v_d`, one per line, each describing
//! `weight * v v^T`.
//!
//! Set Hessians are means over their own set: `H_R = (1/n_r) sum_r H_r` and
//! `H_F = (1/n_f) sum_f H_f`.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::matker::{self, RankOneFactor, SymMatrix, DEFAULT_PSD_TOL};

/// One per-sample Hessian, dense or factored.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleHessian {
    Dense(SymMatrix),
    RankOne(RankOneFactor),
}

impl SampleHessian {
    pub fn dim(&self) -> usize {
        match self {
            SampleHessian::Dense(m) => m.dim(),
            SampleHessian::RankOne(f) => f.dim(),
        }
    }

    pub fn densify(&self) -> SymMatrix {
        match self {
            SampleHessian::Dense(m) => m.clone(),
            SampleHessian::RankOne(f) => f.densify(),
        }
    }

    pub fn as_rank_one(&self) -> Option<&RankOneFactor> {
        match self {
            SampleHessian::RankOne(f) => Some(f),
            SampleHessian::Dense(_) => None,
        }
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SampleHessian::Dense(m) => m.mul_vec(x),
            SampleHessian::RankOne(f) => {
                if x.len() != f.dim() {
                    return Err(shape_err(f.dim(), x.len()));
                }
                Ok(f.apply(x))
            }
        }
    }

    /// `out += coef * H x`.
    pub fn apply_add(&self, coef: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            SampleHessian::RankOne(f) => {
                if x.len() != f.dim() || out.len() != f.dim() {
                    return Err(shape_err(f.dim(), x.len()));
                }
                let c = coef * f.weight * matker::dot(&f.vector, x);
                if c != 0.0 {
                    for (o, v) in out.iter_mut().zip(&f.vector) {
                        *o += c * v;
                    }
                }
                Ok(())
            }
            SampleHessian::Dense(m) => {
                let hx = m.mul_vec(x)?;
                for (o, v) in out.iter_mut().zip(&hx) {
                    *o += coef * v;
                }
                Ok(())
            }
        }
    }

    /// `out += coef * H v H`.
    pub fn add_congruence(&self, coef: f64, v: &SymMatrix, out: &mut SymMatrix) -> Result<()> {
        match self {
            SampleHessian::RankOne(f) => {
                // H V H = w^2 (u^T V u) u u^T
                let q = v.quadratic_form(&f.vector)?;
                out.add_outer(coef * f.weight * f.weight * q, &f.vector)
            }
            SampleHessian::Dense(m) => out.add_scaled(coef, &m.congruence(v)?),
        }
    }

    pub fn lambda_max(&self) -> Result<f64> {
        match self {
            SampleHessian::Dense(m) => matker::lambda_max(m),
            SampleHessian::RankOne(f) => Ok(f.eigenvalue()),
        }
    }
}

impl From<SymMatrix> for SampleHessian {
    fn from(m: SymMatrix) -> Self {
        SampleHessian::Dense(m)
    }
}

impl From<RankOneFactor> for SampleHessian {
    fn from(f: RankOneFactor) -> Self {
        SampleHessian::RankOne(f)
    }
}

/// Retain and forget Hessians sharing one dimension. Every member is PSD
/// within [`DEFAULT_PSD_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEnsemble {
    dim: usize,
    retain: Vec<SampleHessian>,
    forget: Vec<SampleHessian>,
}

impl HessianEnsemble {
    pub fn new(dim: usize, retain: Vec<SampleHessian>, forget: Vec<SampleHessian>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        for h in retain.iter().chain(&forget) {
            if h.dim() != dim {
                return Err(shape_err(dim, h.dim()));
            }
            if let SampleHessian::Dense(m) = h {
                let eig = matker::sym_eig(m)?;
                let threshold = DEFAULT_PSD_TOL * eig.values[0].max(1.0);
                let bottom = *eig.values.last().expect("dim > 0");
                if bottom < -threshold {
                    return Err(Error::NotPsd {
                        eigenvalue: bottom,
                        threshold,
                    });
                }
            }
        }
        Ok(Self { dim, retain, forget })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn retain(&self) -> &[SampleHessian] {
        &self.retain
    }

    pub fn forget(&self) -> &[SampleHessian] {
        &self.forget
    }

    pub fn n_retain(&self) -> usize {
        self.retain.len()
    }

    pub fn n_forget(&self) -> usize {
        self.forget.len()
    }

    pub fn all_rank_one(&self) -> bool {
        self.retain
            .iter()
            .chain(&self.forget)
            .all(|h| h.as_rank_one().is_some())
    }

    /// Same ensemble with every member densified.
    pub fn to_dense(&self) -> Self {
        let dense = |v: &[SampleHessian]| v.iter().map(|h| SampleHessian::Dense(h.densify())).collect();
        Self {
            dim: self.dim,
            retain: dense(&self.retain),
            forget: dense(&self.forget),
        }
    }

    /// Same ensemble with every Hessian multiplied by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let scale = |v: &[SampleHessian]| {
            v.iter()
                .map(|h| match h {
                    SampleHessian::Dense(m) => SampleHessian::Dense(m.scaled(c)),
                    SampleHessian::RankOne(f) => SampleHessian::RankOne(RankOneFactor {
                        vector: f.vector.clone(),
                        weight: f.weight * c,
                    }),
                })
                .collect()
        };
        Self {
            dim: self.dim,
            retain: scale(&self.retain),
            forget: scale(&self.forget),
        }
    }

    /// Parses the text format described in the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim_start().starts_with('#'))
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)));

        let (line, first) = tokens.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty ensemble file".into(),
        })?;
        let rank_one = first == "RANK1";
        let dim_tok = if rank_one { tokens.next() } else { Some((line, first)) };
        let mut header = [0usize; 3];
        let mut header_tok = dim_tok.into_iter().chain(tokens.by_ref().take(2));
        for slot in header.iter_mut() {
            let (l, t) = header_tok.next().ok_or(Error::Parse {
                line,
                msg: "truncated header".into(),
            })?;
            *slot = t.parse().map_err(|_| Error::Parse {
                line: l,
                msg: format!("expected a non-negative integer, got {t:?}"),
            })?;
        }
        let [dim, n_r, n_f] = header;
        if dim == 0 {
            return Err(Error::Parse {
                line,
                msg: "dimension must be positive".into(),
            });
        }

        let mut next_f64 = || -> Result<f64> {
            let (l, t) = tokens.next().ok_or(Error::Parse {
                line: 0,
                msg: "unexpected end of file".into(),
            })?;
            let v: f64 = t.parse().map_err(|_| Error::Parse {
                line: l,
                msg: format!("expected a number, got {t:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: l,
                    msg: format!("non-finite value {t:?}"),
                });
            }
            Ok(v)
        };

        let mut members = Vec::with_capacity(n_r + n_f);
        for _ in 0..n_r + n_f {
            if rank_one {
                let weight = next_f64()?;
                let vector = (0..dim).map(|_| next_f64()).collect::<Result<Vec<_>>>()?;
                members.push(SampleHessian::RankOne(RankOneFactor::new(vector, weight)?));
            } else {
                let entries = (0..dim * dim).map(|_| next_f64()).collect::<Result<Vec<_>>>()?;
                members.push(SampleHessian::Dense(SymMatrix::from_row_major(dim, &entries)?));
            }
        }
        if let Some((l, t)) = tokens.next() {
            return Err(Error::Parse {
                line: l,
                msg: format!("trailing token {t:?}"),
            });
        }
        let forget = members.split_off(n_r);
        Self::new(dim, members, forget)
    }

    /// Serializes to the text format; uses the `RANK1` variant when every
    /// member is factored. Values use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.all_rank_one() {
            let _ = writeln!(out, "RANK1 {} {} {}", self.dim, self.n_retain(), self.n_forget());
            for h in self.retain.iter().chain(&self.forget) {
                let f = h.as_rank_one().expect("checked");
                let _ = write!(out, "{:?}", f.weight);
                for v in &f.vector {
                    let _ = write!(out, " {v:?}");
                }
                out.push('\n');
            }
        } else {
            let _ = writeln!(out, "{} {} {}", self.dim, self.n_retain(), self.n_forget());
            for h in self.retain.iter().chain(&self.forget) {
                let m = h.densify();
                for i in 0..self.dim {
                    let row: Vec<String> = (0..self.dim).map(|j| format!("{:?}", m.get(i, j))).collect();
                    let _ = writeln!(out, "{}", row.join(" "));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn parse_dense() {
        let text = "# two samples\n2 1 1\n1 0\n0 0\n\n0 0 0 2\n";
        let e = HessianEnsemble::parse(text).unwrap();
        assert_eq!((e.dim(), e.n_retain(), e.n_forget()), (2, 1, 1));
        assert_eq!(e.forget()[0].densify().get(1, 1), 2.0);
    }

    #[test]
    fn parse_rank_one() {
        let text = "RANK1 3 2 0\n4 1 0 0\n4 0 1 0\n";
        let e = HessianEnsemble::parse(text).unwrap();
        assert!(e.all_rank_one());
        assert_eq!(e.n_forget(), 0);
        assert_eq!(e.retain()[1].lambda_max().unwrap(), 4.0);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(HessianEnsemble::parse(""), Err(Error::Parse { .. })));
        assert!(matches!(
            HessianEnsemble::parse("2 1 0\n1 0 0"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            HessianEnsemble::parse("2 1 0\n1 0 0 x"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(HessianEnsemble::parse("1 1 0\n1 2"), Err(Error::Parse { .. })));
        // Indefinite member.
        assert!(matches!(HessianEnsemble::parse("1 1 0\n-1"), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let err = HessianEnsemble::new(
            2,
            vec![SymMatrix::identity(2).into()],
            vec![SymMatrix::identity(3).into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    fn random_ensemble(seed: u64, rank_one: bool) -> HessianEnsemble {
        let mut rng = rng_from_seed(seed);
        let d = rng.random_range(1..5);
        let n_r = rng.random_range(1..4);
        let n_f = rng.random_range(0..4);
        let mut make = |_| -> SampleHessian {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let f = RankOneFactor::new(v, rng.random_range(0.0..2.0)).unwrap();
            if rank_one {
                f.into()
            } else {
                f.densify().into()
            }
        };
        let retain = (0..n_r).map(&mut make).collect();
        let forget = (0..n_f).map(&mut make).collect();
        HessianEnsemble::new(d, retain, forget).unwrap()
    }

    proptest! {
        #[test]
        fn text_round_trip(seed in 0u64..10_000, rank_one in any::<bool>()) {
            let e = random_ensemble(seed, rank_one);
            let back = HessianEnsemble::parse(&e.to_text()).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}
