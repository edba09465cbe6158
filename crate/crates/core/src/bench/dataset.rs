//! Line-delimited episode files.
//!
//! One episode per line, six tab-separated fields:
//!
//! ```text
//! split  positions          ids    instruction  shape  target
//! train  x,y,z;x,y,z;...    3,7    1            4x7    v,v,... (row-major)
//! ```
//!
//! Floats are written in shortest round-trip form, so export→import is exact.
//! Lines starting with `#` are comments.

use sha2::{Digest, Sha256};

use super::{target_action, Episode, Split, ACTION_DIM, HORIZON};
use crate::backbones::SceneSpec;
use crate::error::{Error, Result};
use crate::flow::ActionChunk;
use crate::tensor::Tensor;

pub const HEADER: &str = "# split\tpositions\tids\tinstruction\tshape\ttarget";

pub fn export_dataset(episodes: &[Episode]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in episodes {
        let s = &e.scene;
        let pos: Vec<String> = s
            .object_positions
            .iter()
            .map(|p| format!("{},{},{}", p[0], p[1], p[2]))
            .collect();
        let ids: Vec<String> = s.object_ids.iter().map(|i| i.to_string()).collect();
        let target: Vec<String> = e
            .target
            .actions
            .data()
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}x{}\t{}\n",
            e.split.as_str(),
            pos.join(";"),
            ids.join(","),
            s.instruction_id,
            HORIZON,
            ACTION_DIM,
            target.join(",")
        ));
    }
    out
}

/// Parse an exported file; every target must equal the closed-form chunk.
pub fn import_dataset(text: &str) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let split: Split = f[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let object_positions = f[1]
            .split(';')
            .map(|p| {
                let c = parse_floats(p).map_err(&err)?;
                <[f64; 3]>::try_from(c)
                    .map_err(|c| err(format!("position needs 3 coordinates, got {}", c.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let object_ids = f[2]
            .split(',')
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|e| err(format!("bad id `{v}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let instruction_id = f[3]
            .parse::<usize>()
            .map_err(|e| err(format!("bad instruction `{}`: {e}", f[3])))?;
        if f[4] != format!("{HORIZON}x{ACTION_DIM}") {
            return Err(err(format!(
                "chunk shape `{}` is not {HORIZON}x{ACTION_DIM}",
                f[4]
            )));
        }
        let values = parse_floats(f[5]).map_err(&err)?;
        let actions =
            Tensor::new(vec![1, HORIZON, ACTION_DIM], values).map_err(|e| err(e.to_string()))?;
        let scene = SceneSpec {
            object_positions,
            object_ids,
            instruction_id,
        };
        scene.validate().map_err(|e| err(e.to_string()))?;
        let target = ActionChunk { actions };
        if !target.actions.bit_eq(&target_action(&scene).actions) {
            return Err(err("target chunk differs from the closed-form reach".into()));
        }
        out.push(Episode {
            scene,
            target,
            split,
        });
    }
    Ok(out)
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| format!("bad number `{v}`: {e}"))
        })
        .collect()
}

/// SHA-256 of the exported text, lowercase hex.
pub fn dataset_hash(episodes: &[Episode]) -> String {
    let digest = Sha256::digest(export_dataset(episodes).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
