//! Built-in architectures. Layer choices live in `models/*.json`.
//!
//! | name         | input    | d      |
//! |--------------|----------|--------|
//! | `mlp`        | 784      | 101,770 |
//! | `lenet1`     | 1×28×28  | 3,246  |
//! | `lenet5`     | 1×28×28  | 61,706 |
//! | `lenet5_rgb` | 3×32×32  | 62,006 |

use super::{NetworkError, NetworkSpec};

pub const NAMES: [&str; 4] = ["mlp", "lenet1", "lenet5", "lenet5_rgb"];

fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "mlp" => include_str!("../../models/mlp.json"),
        "lenet1" => include_str!("../../models/lenet1.json"),
        "lenet5" => include_str!("../../models/lenet5.json"),
        "lenet5_rgb" => include_str!("../../models/lenet5_rgb.json"),
        _ => return None,
    })
}

pub fn builtin(name: &str) -> Result<NetworkSpec, NetworkError> {
    let text = source(name).ok_or_else(|| NetworkError::UnknownModel(name.to_string()))?;
    NetworkSpec::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_parameter_counts() {
        assert_eq!(builtin("mlp").unwrap().param_count(), 101_770);
        assert_eq!(builtin("lenet1").unwrap().param_count(), 3_246);
        assert_eq!(builtin("lenet5").unwrap().param_count(), 61_706);
        assert_eq!(builtin("lenet5_rgb").unwrap().param_count(), 62_006);
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(builtin("resnet18"), Err(NetworkError::UnknownModel(_))));
    }
}
