//! Small benchmark networks bundled with the library.

use crate::grid::{CaseError, Network};

const CASES: &[(&str, &str)] = &[
    ("case1", include_str!("../cases/case1.json")),
    ("case2", include_str!("../cases/case2.json")),
    ("case3", include_str!("../cases/case3.json")),
    ("case5_pjm", include_str!("../cases/case5_pjm.json")),
    ("bimodal3", include_str!("../cases/bimodal3.json")),
];

/// Names accepted by [`builtin`].
pub fn names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(name, _)| *name)
}

/// Parses a bundled case by name.
pub fn builtin(name: &str) -> Option<Result<Network, CaseError>> {
    CASES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Network::from_json_str(text))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_bundled_cases_parse() {
        for name in super::names() {
            super::builtin(name).unwrap().unwrap();
        }
    }

    #[test]
    fn pjm_counts() {
        let net = super::builtin("case5_pjm").unwrap().unwrap();
        assert_eq!((net.n_bus(), net.n_gen(), net.n_line()), (5, 5, 6));
    }
}
