use serde::Serialize;

use super::spec::ExperimentSpec;
use crate::pipeline::TrainConfig;

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// `axis=value` pairs joined by commas, or `base` without sweep axes.
    pub name: String,
    /// The swept settings, in axis order.
    pub axes: Vec<(String, String)>,
    pub train: TrainConfig,
}

type Setter = Box<dyn Fn(&mut TrainConfig)>;

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("axis values serialize") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn axis<T: Serialize + Clone + 'static>(
    out: &mut Vec<(&'static str, Vec<(String, Setter)>)>,
    name: &'static str,
    values: &Option<Vec<T>>,
    set: fn(&mut TrainConfig, T),
) {
    if let Some(vs) = values {
        let entries = vs
            .iter()
            .map(|v| {
                let v2 = v.clone();
                (
                    label(v),
                    Box::new(move |c: &mut TrainConfig| set(c, v2.clone())) as Setter,
                )
            })
            .collect();
        out.push((name, entries));
    }
}

/// Cartesian product of the sweep axes over the base training config. The
/// first axis varies slowest.
pub fn expand_grid(spec: &ExperimentSpec) -> Vec<Cell> {
    let s = &spec.sweep;
    let mut axes = Vec::new();
    axis(&mut axes, "tau", &s.tau, |c, v| c.tau = v);
    axis(&mut axes, "rho", &s.rho, |c, v| c.rho = v);
    axis(&mut axes, "alpha", &s.alpha, |c, v| c.alpha = v);
    axis(&mut axes, "beta", &s.beta, |c, v| c.beta = v);
    axis(&mut axes, "early_stop", &s.early_stop, |c, v| {
        c.early_stop = v
    });
    axis(&mut axes, "easy_loss", &s.easy_loss, |c, v| c.easy_loss = v);
    axis(&mut axes, "hard_loss", &s.hard_loss, |c, v| c.hard_loss = v);
    axis(
        &mut axes,
        "consistency_scope",
        &s.consistency_scope,
        |c, v| c.consistency_scope = v,
    );
    axis(&mut axes, "iterations", &s.iterations, |c, v| {
        c.iterations = v
    });
    axis(&mut axes, "risk", &s.risk, |c, v| c.risk = v);

    let mut cells = vec![Cell {
        name: String::new(),
        axes: Vec::new(),
        train: spec.train.clone(),
    }];
    for (name, entries) in &axes {
        let mut next = Vec::with_capacity(cells.len() * entries.len());
        for cell in &cells {
            for (value, set) in entries {
                let mut c = cell.clone();
                set(&mut c.train);
                c.axes.push((name.to_string(), value.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &mut cells {
        c.name = if c.axes.is_empty() {
            "base".to_string()
        } else {
            c.axes
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
    }
    cells
}
