use std::path::PathBuf;

use kfusion::LogError;

pub type Check = fn(&LogError) -> bool;

pub fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every corrupted fixture with a predicate for the error it must produce.
pub fn corrupted() -> Vec<(&'static str, Check)> {
    vec![
        ("bad_magic.kfpl", |e| matches!(e, LogError::BadMagic(m) if m == b"KFPX")),
        ("bad_version.kfpl", |e| matches!(e, LogError::UnsupportedVersion(2))),
        ("unknown_flags.kfpl", |e| matches!(e, LogError::UnknownFlags(8))),
        ("bad_split.kfpl", |e| matches!(e, LogError::InvalidSplitTag(3))),
        ("truncated_header.kfpl", |e| matches!(e, LogError::Truncated { section: "header", expected: 24, actual: 10 })),
        ("truncated_probs.kfpl", |e| {
            matches!(e, LogError::Truncated { section: "probabilities", expected: 109, actual: 107 })
        }),
        ("trailing_bytes.kfpl", |e| matches!(e, LogError::TrailingBytes { expected: 36, actual: 37 })),
        ("mask_padding.kfpl", |e| matches!(e, LogError::MaskPadding)),
        ("label_out_of_range.kfpl", |e| matches!(e, LogError::LabelOutOfRange { example: 0, label: 2, classes: 2 })),
        (
            "simplex_violation.kfpl",
            |e| matches!(e, LogError::SimplexViolation { epoch: 0, example: 0, sum } if (sum - 1.2).abs() < 1e-6),
        ),
        ("probability_out_of_range.kfpl", |e| matches!(e, LogError::ProbabilityOutOfRange { .. })),
        ("nan_probability.kfpl", |e| matches!(e, LogError::ProbabilityOutOfRange { value, .. } if value.is_nan())),
        ("one_class.kfpl", |e| matches!(e, LogError::Shape(_))),
        ("overflow_dims.kfpl", |e| matches!(e, LogError::Shape(_))),
    ]
}
