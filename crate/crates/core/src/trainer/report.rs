//! Histories and reports as JSON lines.

use serde::Serialize;

/// One JSON object per line.
pub fn to_json_lines<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct R {
        epoch: usize,
        loss: f64,
    }

    #[test]
    fn one_object_per_line() {
        let s = to_json_lines(&[R { epoch: 0, loss: 0.5 }, R { epoch: 1, loss: 0.25 }]);
        assert_eq!(s, "{\"epoch\":0,\"loss\":0.5}\n{\"epoch\":1,\"loss\":0.25}\n");
    }
}
