//! Bit-exact checkpoints.
//!
//! A checkpoint is a directory holding `manifest`, a UTF-8 text file, and
//! `tensors.bin`, the raw little-endian IEEE-754 values of every tensor,
//! row-major, in manifest order. Manifest lines:
//!
//! ```text
//! molf-checkpoint 1
//! step <next step index>
//! mode <molf|molf-e>
//! module <name> <d_out> <d_in> <bias 0|1> <dropout> <base_trainable 0|1> <n_experts>
//! expert <module> <index> <rank> <alpha>
//! state <module> <expert> <fft|lora> <t> <lr_base> <weight_decay>
//! tensor <name> <f64|f32> <rows> <cols> <byte offset> tensors.bin
//! ```
//!
//! Optimizer state is optional; fused exports carry none, and no experts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ExpertClass, LoraExpert, Mode, MolfModule, Network};
use crate::numerics::Matrix;
use crate::optimizer::ExpertState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Index of the next optimizer step to run.
    pub step: usize,
    pub network: Network,
    pub optimizer: Option<Vec<Vec<ExpertState>>>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint {
            tensor: name.into(),
            reason: "module names must be non-empty and contain no whitespace".into(),
        });
    }
    Ok(())
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

/// Writes `ckpt` to `dir` using 64-bit floats.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    save_checkpoint_as(ckpt, dir, Dtype::F64)
}

/// Writes `ckpt` to `dir`. `Dtype::F32` rounds every tensor and is not
/// bit-exact. The directory is assembled beside the target and renamed into
/// place.
pub fn save_checkpoint_as(ckpt: &Checkpoint, dir: &Path, dtype: Dtype) -> Result<()> {
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push_tensor = |manifest: &mut String, name: String, m: &Matrix| {
        let _ = writeln!(
            manifest,
            "tensor {name} {} {} {} {} {BLOB_FILE}",
            dtype.name(),
            m.rows(),
            m.cols(),
            blob.len()
        );
        for &v in m.data() {
            match dtype {
                Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    };

    let _ = writeln!(manifest, "molf-checkpoint {FORMAT_VERSION}");
    let _ = writeln!(manifest, "step {}", ckpt.step);
    let _ = writeln!(manifest, "mode {}", ckpt.network.mode);
    for m in &ckpt.network.modules {
        check_name(&m.name)?;
        let _ = writeln!(
            manifest,
            "module {} {} {} {} {} {} {}",
            m.name,
            m.d_out(),
            m.d_in(),
            flag(m.bias.is_some()),
            m.dropout_rate,
            flag(m.base_trainable),
            m.experts.len()
        );
        for (i, e) in m.experts.iter().enumerate() {
            let _ = writeln!(manifest, "expert {} {i} {} {}", m.name, e.rank, e.alpha);
        }
    }
    if let Some(states) = &ckpt.optimizer {
        if states.len() != ckpt.network.modules.len() {
            return Err(Error::contract(
                "optimizer state does not match the network",
            ));
        }
        for (m, module_states) in ckpt.network.modules.iter().zip(states) {
            for (e, s) in module_states.iter().enumerate() {
                let _ = writeln!(
                    manifest,
                    "state {} {e} {} {} {} {}",
                    m.name, s.class, s.t, s.lr_base, s.weight_decay
                );
            }
        }
    }
    for m in &ckpt.network.modules {
        push_tensor(&mut manifest, format!("{}.base", m.name), &m.base);
        if let Some(b) = &m.bias {
            push_tensor(&mut manifest, format!("{}.bias", m.name), b);
        }
        for (i, e) in m.experts.iter().enumerate() {
            push_tensor(&mut manifest, format!("{}.lora{i}.A", m.name), &e.a);
            push_tensor(&mut manifest, format!("{}.lora{i}.B", m.name), &e.b);
        }
    }
    if let Some(states) = &ckpt.optimizer {
        for (m, module_states) in ckpt.network.modules.iter().zip(states) {
            for (e, s) in module_states.iter().enumerate() {
                for (j, mm) in s.m.iter().enumerate() {
                    push_tensor(&mut manifest, format!("opt.{}.{e}.m{j}", m.name), mm);
                }
                for (j, vv) in s.v.iter().enumerate() {
                    push_tensor(&mut manifest, format!("opt.{}.{e}.v{j}", m.name), vv);
                }
            }
        }
    }

    let staging = staging_path(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    fs::write(staging.join(MANIFEST_FILE), manifest).map_err(|e| Error::io(&staging, e))?;
    fs::write(staging.join(BLOB_FILE), blob).map_err(|e| Error::io(&staging, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

struct TensorEntry {
    name: String,
    dtype: Dtype,
    rows: usize,
    cols: usize,
    offset: usize,
}

struct ModuleEntry {
    name: String,
    d_out: usize,
    d_in: usize,
    bias: bool,
    dropout: f64,
    base_trainable: bool,
    n_experts: usize,
    experts: Vec<(usize, f64)>,
    states: Vec<(ExpertClass, u64, f64, f64)>,
}

fn manifest_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: format!("manifest line {line}"),
        reason: reason.into(),
    }
}

fn field<T: std::str::FromStr>(parts: &[&str], idx: usize, line: usize) -> Result<T> {
    parts
        .get(idx)
        .ok_or_else(|| manifest_err(line, format!("missing field {idx}")))?
        .parse()
        .map_err(|_| manifest_err(line, format!("cannot parse field {idx}: {:?}", parts[idx])))
}

fn parse_flag(parts: &[&str], idx: usize, line: usize) -> Result<bool> {
    match field::<u8>(parts, idx, line)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(manifest_err(
            line,
            format!("flag must be 0 or 1, got {other}"),
        )),
    }
}

/// Reads a checkpoint. Nothing outside the returned value is touched, so a
/// failed load leaves the caller's state as it was.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == format!("molf-checkpoint {FORMAT_VERSION}") => {}
        Some((_, header)) => {
            return Err(Error::Checkpoint {
                tensor: MANIFEST_FILE.into(),
                reason: format!("unsupported header {header:?}"),
            })
        }
        None => {
            return Err(Error::Checkpoint {
                tensor: MANIFEST_FILE.into(),
                reason: "empty manifest".into(),
            })
        }
    }

    let mut step = None;
    let mut mode = None;
    let mut modules: Vec<ModuleEntry> = Vec::new();
    let mut tensors: Vec<TensorEntry> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        let Some(&kind) = parts.first() else { continue };
        let module_pos = |name: &str, modules: &[ModuleEntry]| {
            modules
                .iter()
                .position(|m| m.name == name)
                .ok_or_else(|| manifest_err(line, format!("unknown module {name}")))
        };
        match kind {
            "step" => step = Some(field::<usize>(&parts, 1, line)?),
            "mode" => mode = Some(field::<Mode>(&parts, 1, line)?),
            "module" => modules.push(ModuleEntry {
                name: field(&parts, 1, line)?,
                d_out: field(&parts, 2, line)?,
                d_in: field(&parts, 3, line)?,
                bias: parse_flag(&parts, 4, line)?,
                dropout: field(&parts, 5, line)?,
                base_trainable: parse_flag(&parts, 6, line)?,
                n_experts: field(&parts, 7, line)?,
                experts: Vec::new(),
                states: Vec::new(),
            }),
            "expert" => {
                let pos = module_pos(parts.get(1).copied().unwrap_or(""), &modules)?;
                let index: usize = field(&parts, 2, line)?;
                if index != modules[pos].experts.len() {
                    return Err(manifest_err(line, "experts out of order"));
                }
                let rank = field(&parts, 3, line)?;
                let alpha = field(&parts, 4, line)?;
                modules[pos].experts.push((rank, alpha));
            }
            "state" => {
                let pos = module_pos(parts.get(1).copied().unwrap_or(""), &modules)?;
                let index: usize = field(&parts, 2, line)?;
                if index != modules[pos].states.len() {
                    return Err(manifest_err(line, "optimizer states out of order"));
                }
                let class = match parts.get(3).copied() {
                    Some("fft") => ExpertClass::Fft,
                    Some("lora") => ExpertClass::Lora,
                    other => {
                        return Err(manifest_err(
                            line,
                            format!("unknown expert class {other:?}"),
                        ))
                    }
                };
                let t = field(&parts, 4, line)?;
                let lr = field(&parts, 5, line)?;
                let wd = field(&parts, 6, line)?;
                modules[pos].states.push((class, t, lr, wd));
            }
            "tensor" => {
                let dtype = match parts.get(2).copied() {
                    Some("f64") => Dtype::F64,
                    Some("f32") => Dtype::F32,
                    other => return Err(manifest_err(line, format!("unknown dtype {other:?}"))),
                };
                if parts.get(6).copied() != Some(BLOB_FILE) {
                    return Err(manifest_err(line, "tensors must live in tensors.bin"));
                }
                tensors.push(TensorEntry {
                    name: field(&parts, 1, line)?,
                    dtype,
                    rows: field(&parts, 3, line)?,
                    cols: field(&parts, 4, line)?,
                    offset: field(&parts, 5, line)?,
                });
            }
            other => return Err(manifest_err(line, format!("unknown record {other:?}"))),
        }
    }
    let step = step.ok_or_else(|| manifest_err(0, "missing step"))?;
    let mode = mode.ok_or_else(|| manifest_err(0, "missing mode"))?;

    let mut next_tensor = tensors.iter();
    let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
        let entry = next_tensor.next().ok_or_else(|| Error::Checkpoint {
            tensor: name.clone(),
            reason: "missing from manifest".into(),
        })?;
        let fail = |reason: String| Error::Checkpoint {
            tensor: name.clone(),
            reason,
        };
        if entry.name != name {
            return Err(fail(format!("found {} in its registry slot", entry.name)));
        }
        if (entry.rows, entry.cols) != (rows, cols) {
            return Err(fail(format!(
                "shape {}x{} does not match expected {rows}x{cols}",
                entry.rows, entry.cols
            )));
        }
        let width = entry.dtype.width();
        let end = entry.offset + rows * cols * width;
        if end > blob.len() {
            return Err(fail(format!(
                "needs bytes {}..{end} but {BLOB_FILE} has {}",
                entry.offset,
                blob.len()
            )));
        }
        let bytes = &blob[entry.offset..end];
        let data: Vec<f64> = match entry.dtype {
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
        };
        Matrix::from_vec(rows, cols, data)
    };

    let mut network_modules = Vec::with_capacity(modules.len());
    for m in &modules {
        if m.experts.len() != m.n_experts {
            return Err(Error::Checkpoint {
                tensor: m.name.clone(),
                reason: format!(
                    "declares {} experts, lists {}",
                    m.n_experts,
                    m.experts.len()
                ),
            });
        }
        let base = take(format!("{}.base", m.name), m.d_out, m.d_in)?;
        let bias = if m.bias {
            Some(take(format!("{}.bias", m.name), m.d_out, 1)?)
        } else {
            None
        };
        let mut experts = Vec::with_capacity(m.experts.len());
        for (i, &(rank, alpha)) in m.experts.iter().enumerate() {
            let mut e =
                LoraExpert::new(rank, alpha, m.d_in, m.d_out).map_err(|err| Error::Checkpoint {
                    tensor: format!("{}.lora{i}", m.name),
                    reason: err.to_string(),
                })?;
            e.a = take(format!("{}.lora{i}.A", m.name), rank, m.d_in)?;
            e.b = take(format!("{}.lora{i}.B", m.name), m.d_out, rank)?;
            experts.push(e);
        }
        let module = MolfModule::new(
            m.name.clone(),
            base,
            bias,
            experts,
            m.dropout,
            m.base_trainable,
        )
        .map_err(|err| Error::Checkpoint {
            tensor: m.name.clone(),
            reason: err.to_string(),
        })?;
        network_modules.push(module);
    }

    let has_state = modules.iter().any(|m| !m.states.is_empty());
    let optimizer = if has_state {
        let mut all = Vec::with_capacity(modules.len());
        for (entry, module) in modules.iter().zip(&network_modules) {
            if entry.states.len() != module.routable_count() {
                return Err(Error::Checkpoint {
                    tensor: entry.name.clone(),
                    reason: format!(
                        "{} optimizer states for {} routable experts",
                        entry.states.len(),
                        module.routable_count()
                    ),
                });
            }
            let mut states = Vec::with_capacity(entry.states.len());
            for (e, &(class, t, lr, wd)) in entry.states.iter().enumerate() {
                let shapes: Vec<_> = module.expert_params(e).iter().map(|p| p.shape()).collect();
                let mut s = ExpertState::new(class, &shapes, lr, wd);
                s.t = t;
                for (j, &(r, c)) in shapes.iter().enumerate() {
                    s.m[j] = take(format!("opt.{}.{e}.m{j}", entry.name), r, c)?;
                }
                for (j, &(r, c)) in shapes.iter().enumerate() {
                    s.v[j] = take(format!("opt.{}.{e}.v{j}", entry.name), r, c)?;
                }
                states.push(s);
            }
            all.push(states);
        }
        Some(all)
    } else {
        None
    };
    if let Some(extra) = next_tensor.next() {
        return Err(Error::Checkpoint {
            tensor: extra.name.clone(),
            reason: "not referenced by any module".into(),
        });
    }

    Ok(Checkpoint {
        step,
        network: Network {
            modules: network_modules,
            mode,
        },
        optimizer,
    })
}
