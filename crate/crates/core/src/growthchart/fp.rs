//! Fractional polynomial bases.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GrowthError;

pub const FP_POWERS: [f64; 8] = [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpSpec {
    pub powers: Vec<f64>,
}

impl FpSpec {
    pub fn new(powers: Vec<f64>) -> Result<Self, GrowthError> {
        let spec = Self { powers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fp1(p: f64) -> Self {
        Self { powers: vec![p] }
    }

    pub fn fp2(p: f64, q: f64) -> Self {
        Self { powers: vec![p, q] }
    }

    pub fn order(&self) -> usize {
        self.powers.len()
    }

    pub fn validate(&self) -> Result<(), GrowthError> {
        if !(1..=2).contains(&self.powers.len()) {
            return Err(GrowthError::InvalidSpec(format!("order {} not in 1..=2", self.powers.len())));
        }
        if let Some(p) = self.powers.iter().find(|p| !FP_POWERS.contains(p)) {
            return Err(GrowthError::InvalidSpec(format!("power {p} not in the allowed set")));
        }
        Ok(())
    }

    /// Power pair as written, with the smaller power first.
    fn canonical(&self) -> Vec<f64> {
        let mut p = self.powers.clone();
        p.sort_by(f64::total_cmp);
        p
    }

    /// True when both specs describe the same basis.
    pub fn same_family(&self, other: &FpSpec) -> bool {
        self.canonical() == other.canonical()
    }
}

impl fmt::Display for FpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.powers.iter().map(|p| p.to_string()).collect();
        write!(f, "FP{}({})", self.order(), parts.join(","))
    }
}

impl FromStr for FpSpec {
    type Err = GrowthError;

    /// Accepts `"0.5"` or `"-2,1"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let powers = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| GrowthError::InvalidSpec(format!("bad power '{t}'"))))
            .collect::<Result<Vec<_>, _>>()?;
        FpSpec::new(powers)
    }
}

fn power(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        x.ln()
    } else if p == 0.5 {
        x.sqrt()
    } else if p.fract() == 0.0 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

/// Basis values; a repeated power `(p, p)` yields `[x^p, x^p ln x]`.
pub fn fp_basis(x: f64, spec: &FpSpec) -> Result<Vec<f64>, GrowthError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(GrowthError::DomainError(format!("fp basis needs x > 0, got {x}")));
    }
    spec.validate()?;
    let first = power(x, spec.powers[0]);
    Ok(match spec.powers.as_slice() {
        [_] => vec![first],
        [p, q] if p == q => vec![first, first * x.ln()],
        [_, q] => vec![first, power(x, *q)],
        _ => unreachable!("validated order"),
    })
}

/// All 8 FP1 and 36 FP2 specs.
pub fn fp_candidates() -> Vec<FpSpec> {
    let mut out: Vec<FpSpec> = FP_POWERS.iter().map(|&p| FpSpec::fp1(p)).collect();
    for (i, &p) in FP_POWERS.iter().enumerate() {
        for &q in &FP_POWERS[i..] {
            out.push(FpSpec::fp2(p, q));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basis_examples() {
        assert_eq!(fp_basis(4.0, &FpSpec::fp1(0.5)).unwrap(), vec![2.0]);
        let e = std::f64::consts::E;
        let b = fp_basis(e, &FpSpec::fp2(0.0, 0.0)).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 1.0).abs() < 1e-15);
        let b = fp_basis(2.0, &FpSpec::fp2(1.0, 1.0)).unwrap();
        assert_eq!(b[0], 2.0);
        assert!((b[1] - 1.38629).abs() < 1e-5);
        assert_eq!(fp_basis(2.0, &FpSpec::fp2(-2.0, 3.0)).unwrap(), vec![0.25, 8.0]);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(fp_basis(0.0, &FpSpec::fp1(1.0)), Err(GrowthError::DomainError(_))));
        assert!(matches!(fp_basis(-1.0, &FpSpec::fp1(1.0)), Err(GrowthError::DomainError(_))));
        assert!(FpSpec::new(vec![0.25]).is_err());
        assert!(FpSpec::new(vec![]).is_err());
        assert!(FpSpec::new(vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn candidate_count() {
        let c = fp_candidates();
        assert_eq!(c.len(), 44);
        assert_eq!(c.iter().filter(|s| s.order() == 1).count(), 8);
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                assert!(!a.same_family(b));
            }
        }
    }

    #[test]
    fn parse_and_display() {
        let s: FpSpec = "-2, 1".parse().unwrap();
        assert_eq!(s.powers, vec![-2.0, 1.0]);
        assert_eq!(s.to_string(), "FP2(-2,1)");
        assert!("x".parse::<FpSpec>().is_err());
        assert!(FpSpec::fp2(1.0, -2.0).same_family(&s));
    }

    proptest! {
        #[test]
        fn powers_match_powf(x in 0.01f64..100.0, i in 0usize..8) {
            let p = FP_POWERS[i];
            let got = fp_basis(x, &FpSpec::fp1(p)).unwrap()[0];
            let want = if p == 0.0 { x.ln() } else { x.powf(p) };
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
