//! One preset per (problem, β) cell of the experiment tables.

use super::config::RunConfig;

/// `(problem, p, betas)` for every experiment table.
pub const TABLES: [(&str, Option<f64>, [f64; 3]); 10] = [
    ("mixed2d", None, [500.0, 1000.0, 2000.0]),
    ("crack2d", None, [500.0, 1000.0, 2000.0]),
    ("plap_smooth", Some(1.2), [500.0, 1000.0, 2000.0]),
    ("plap_smooth", Some(2.4), [500.0, 1000.0, 2000.0]),
    ("plap_smooth", Some(3.6), [500.0, 1000.0, 2000.0]),
    ("plap_singular", Some(2.4), [500.0, 1000.0, 2000.0]),
    ("plap_singular", Some(3.6), [3000.0, 4000.0, 5000.0]),
    ("plap_singular", Some(4.8), [6000.0, 7000.0, 8000.0]),
    ("dirichlet20d", None, [50.0, 500.0, 5000.0]),
    ("dirichlet100d", None, [50.0, 500.0, 5000.0]),
];

/// `mixed2d_beta2000`, `plap_smooth_p2.4_beta500`, ...
pub fn preset_name(problem: &str, p: Option<f64>, beta: f64) -> String {
    match p {
        Some(p) => format!("{problem}_p{p}_beta{beta}"),
        None => format!("{problem}_beta{beta}"),
    }
}

pub fn preset_names() -> Vec<String> {
    TABLES
        .iter()
        .flat_map(|&(name, p, betas)| betas.map(|b| preset_name(name, p, b)))
        .collect()
}

pub fn preset(name: &str) -> Option<RunConfig> {
    TABLES.iter().find_map(|&(problem, p, betas)| {
        betas
            .iter()
            .find(|&&b| preset_name(problem, p, b) == name)
            .map(|&b| RunConfig::with_defaults(problem, p, b).expect("preset problems are registered"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Problem;

    #[test]
    fn thirty_presets_all_resolve() {
        let names = preset_names();
        assert_eq!(names.len(), 30);
        for name in &names {
            let c = preset(name).unwrap();
            let run = c.resolve().unwrap();
            assert_eq!(run.setup.network.input_dim, run.problem.geometry().dim());
            assert_eq!(c.output_dir.file_name().unwrap().to_str().unwrap(), name);
        }
        assert!(preset("mixed2d_beta3").is_none());
    }

    #[test]
    fn paper_regimes() {
        let c = preset("mixed2d_beta2000").unwrap();
        assert_eq!((c.width, c.blocks, c.epochs, c.n_interior, c.n_boundary), (10, 5, 50_000, 64, 64));
        let c = preset("dirichlet100d_beta500").unwrap();
        assert_eq!((c.width, c.blocks, c.n_interior), (100, 5, 512));
        let c = preset("plap_singular_p4.8_beta7000").unwrap();
        assert_eq!(c.p, Some(4.8));
    }
}
