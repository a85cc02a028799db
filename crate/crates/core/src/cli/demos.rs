//! Bundled demo configurations, one per verification scenario. The JSON files
//! live under `demos/` in the crate and are compiled in, so `list-demos` and
//! the test suite see exactly what ships.

/// A bundled demo: its config name, what it demonstrates, and the raw JSON.
#[derive(Debug, Clone, Copy)]
pub struct Demo {
    pub name: &'static str,
    pub summary: &'static str,
    pub json: &'static str,
}

static DEMOS: &[Demo] = &[
    Demo {
        name: "extend-check",
        summary: "one-point extension exactness on 100 random substochastic kernels",
        json: include_str!("../../demos/extend_check.json"),
    },
    Demo {
        name: "lifetime-exp",
        summary: "lifetime of a chain killed at constant rate c is Exp(c)",
        json: include_str!("../../demos/lifetime_exp.json"),
    },
    Demo {
        name: "kill-semigroup",
        summary: "weighted and hard Monte Carlo agree with e^{t(L - diag c)}",
        json: include_str!("../../demos/kill_semigroup.json"),
    },
    Demo {
        name: "generator-kill",
        summary: "killed-operator difference quotients converge to (L - diag c) f",
        json: include_str!("../../demos/generator_kill.json"),
    },
    Demo {
        name: "exit-joint",
        summary: "joint law of lifetime and exit point vs the quadrature oracle",
        json: include_str!("../../demos/exit_joint.json"),
    },
    Demo {
        name: "revival",
        summary: "revival points follow the kernel row of their exit point",
        json: include_str!("../../demos/revival.json"),
    },
    Demo {
        name: "restarts-formula",
        summary: "restart chains match the closed formula (finite-state and OU)",
        json: include_str!("../../demos/restarts_formula.json"),
    },
    Demo {
        name: "gamma-renewal",
        summary: "k-th renewal time of a constant-rate restore chain is Gamma(k, c)",
        json: include_str!("../../demos/gamma_renewal.json"),
    },
    Demo {
        name: "concat-generator",
        summary: "restore-chain difference quotients converge to Lf + diag(c)(mu f - f)",
        json: include_str!("../../demos/concat_generator.json"),
    },
    Demo {
        name: "restore-invariant",
        summary: "long-run occupation of restore chains matches the solved invariant law",
        json: include_str!("../../demos/restore_invariant.json"),
    },
    Demo {
        name: "markov-killed",
        summary: "killed chain: the law at s+t given the state at s ignores history",
        json: include_str!("../../demos/markov_killed.json"),
    },
    Demo {
        name: "markov-concat",
        summary: "restore chain: the law at s+t given the state at s ignores history",
        json: include_str!("../../demos/markov_concat.json"),
    },
];

pub fn demos() -> &'static [Demo] {
    DEMOS
}
