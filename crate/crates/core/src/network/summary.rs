use std::fmt;

use super::config::ModelConfig;
use super::model::Model;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    /// Per-sample output shape.
    pub shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub trainable: usize,
    pub non_trainable: usize,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("(None, {})", dims.join(", "))
}

impl Summary {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        let mut rows = vec![SummaryRow { name: "input".into(), shape: model.input_shape().to_vec(), params: 0 }];
        rows.extend(model.layers().iter().map(|l| SummaryRow {
            name: l.name.clone(),
            shape: l.output_shape.clone(),
            params: l.trainable_params + l.non_trainable_params,
        }));
        Self { rows, trainable: model.trainable_count(), non_trainable: model.non_trainable_count() }
    }

    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Machine-readable totals, one `key=value` per line.
    pub fn totals(&self) -> String {
        format!(
            "total_params={}\ntrainable_params={}\nnon_trainable_params={}\n",
            self.trainable + self.non_trainable,
            self.trainable,
            self.non_trainable
        )
    }
}

impl fmt::Display for Summary {
    /// Tab-separated `layer, output shape, params` rows and totals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer\toutput_shape\tparams")?;
        for r in &self.rows {
            writeln!(f, "{}\t{}\t{}", r.name, shape_str(&r.shape), r.params)?;
        }
        writeln!(f, "trainable\t\t{}", self.trainable)?;
        write!(f, "non_trainable\t\t{}", self.non_trainable)
    }
}

/// Expected layers of the default full-size network.
pub const REFERENCE_ROWS: &[(&str, &[usize], usize)] = &[
    ("input", &[240, 320, 3], 0),
    ("conv2d_1", &[118, 158, 24], 1824),
    ("conv2d_2", &[57, 77, 36], 21636),
    ("max_pooling2d_1", &[28, 38, 36], 0),
    ("batch_normalization_1", &[28, 38, 36], 144),
    ("conv2d_3", &[12, 17, 48], 43248),
    ("conv2d_4", &[10, 15, 64], 27712),
    ("max_pooling2d_2", &[5, 7, 64], 0),
    ("batch_normalization_2", &[5, 7, 64], 256),
    ("conv2d_5", &[3, 5, 128], 73856),
    ("max_pooling2d_3", &[1, 2, 128], 0),
    ("batch_normalization_3", &[1, 2, 128], 512),
    ("reshape_1", &[2, 128], 0),
    ("attention_1", &[2, 1024], 1048577),
    ("bidirectional_1", &[2, 1024], 2625536),
    ("dropout_1", &[2, 1024], 0),
    ("flatten_1", &[2048], 0),
    ("dense_1", &[256], 524544),
    ("dropout_2", &[256], 0),
    ("dense_2", &[64], 16448),
    ("dropout_3", &[64], 0),
    ("dense_3", &[1], 65),
];
pub const REFERENCE_TRAINABLE: usize = 4_383_902;
pub const REFERENCE_NON_TRAINABLE: usize = 456;

/// Differences against the reference table, matched by layer name. Empty
/// when everything agrees.
pub fn golden_diff(summary: &Summary) -> Vec<String> {
    let mut diffs = Vec::new();
    for &(name, shape, params) in REFERENCE_ROWS {
        match summary.row(name) {
            None => diffs.push(format!("{name}: missing (expected {} / {params})", shape_str(shape))),
            Some(r) => {
                if r.shape != shape {
                    diffs.push(format!("{name}: shape {} != expected {}", shape_str(&r.shape), shape_str(shape)));
                }
                if r.params != params {
                    diffs.push(format!("{name}: params {} != expected {params}", r.params));
                }
            }
        }
    }
    for r in &summary.rows {
        if !REFERENCE_ROWS.iter().any(|(n, _, _)| *n == r.name) {
            diffs.push(format!("{}: unexpected layer", r.name));
        }
    }
    if summary.trainable != REFERENCE_TRAINABLE {
        diffs.push(format!("trainable total {} != expected {REFERENCE_TRAINABLE}", summary.trainable));
    }
    if summary.non_trainable != REFERENCE_NON_TRAINABLE {
        diffs.push(format!("non-trainable total {} != expected {REFERENCE_NON_TRAINABLE}", summary.non_trainable));
    }
    diffs
}

pub fn summarize(config: &ModelConfig) -> crate::Result<Summary> {
    Ok(Summary::of(&Model::<f32>::new(config.clone())?))
}
