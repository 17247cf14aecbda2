//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CSCK" | u16 version | u32 header_len | header (JSON)
//! f32 section x4: teacher params, student params, teacher velocity, student velocity
//!     each as u64 length followed by the values
//! pseudo-label state (its own "CSPL" block)
//! ```
//!
//! The JSON header holds the trainer snapshot (config, cursors, threshold,
//! RNG state) plus the model's input channel count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::maps::SegSample;
use crate::model::SegModel;
use crate::optim::Sgd;
use crate::pseudo_label::PseudoLabelState;
use crate::training::{ModelPair, Trainer, TrainerSnapshot};

const MAGIC: &[u8; 4] = b"CSCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub snapshot: TrainerSnapshot,
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub teacher: Vec<f32>,
    pub student: Vec<f32>,
    pub teacher_opt: Sgd,
    pub student_opt: Sgd,
    pub pseudo: PseudoLabelState,
}

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    w.write_u64::<LE>(v.len() as u64).map_err(ck)?;
    for &x in v {
        w.write_f32::<LE>(x).map_err(ck)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R) -> Result<Vec<f32>> {
    let n = r.read_u64::<LE>().map_err(ck)? as usize;
    if n > (1 << 32) {
        return Err(Error::Checkpoint(format!("implausible section length {n}")));
    }
    let mut v = vec![0.0f32; n];
    r.read_f32_into::<LE>(&mut v).map_err(ck)?;
    Ok(v)
}

impl Checkpoint {
    pub fn capture<M: SegModel>(trainer: &Trainer<M>) -> Self {
        let pair = trainer.models();
        let (t_opt, s_opt) = trainer.optimizers();
        Self {
            header: CheckpointHeader {
                snapshot: trainer.snapshot(),
                in_channels: pair.student.in_channels(),
            },
            teacher: pair.teacher.params().to_vec(),
            student: pair.student.params().to_vec(),
            teacher_opt: t_opt.clone(),
            student_opt: s_opt.clone(),
            pseudo: trainer.pseudo_labels().clone(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&HeaderOnDisk {
            header: &self.header,
            teacher_opt: OptMeta::of(&self.teacher_opt),
            student_opt: OptMeta::of(&self.student_opt),
        })?;
        w.write_all(MAGIC).map_err(ck)?;
        w.write_u16::<LE>(VERSION).map_err(ck)?;
        w.write_u32::<LE>(header.len() as u32).map_err(ck)?;
        w.write_all(&header).map_err(ck)?;
        write_f32s(&mut w, &self.teacher)?;
        write_f32s(&mut w, &self.student)?;
        write_f32s(&mut w, &self.teacher_opt.velocity)?;
        write_f32s(&mut w, &self.student_opt.velocity)?;
        self.pseudo.write_to(&mut w)?;
        w.flush().map_err(ck)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(ck)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u16::<LE>().map_err(ck)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LE>().map_err(ck)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(ck)?;
        let disk: HeaderOwned = serde_json::from_slice(&buf)?;
        let teacher = read_f32s(&mut r)?;
        let student = read_f32s(&mut r)?;
        let tv = read_f32s(&mut r)?;
        let sv = read_f32s(&mut r)?;
        let pseudo = PseudoLabelState::read_from(&mut r)?;
        if teacher.len() != student.len() || tv.len() != teacher.len() || sv.len() != teacher.len() {
            return Err(Error::Checkpoint("parameter section lengths disagree".into()));
        }
        Ok(Self {
            header: disk.header,
            teacher,
            student,
            teacher_opt: disk.teacher_opt.with_velocity(tv),
            student_opt: disk.student_opt.with_velocity(sv),
            pseudo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).at(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        Self::read_from(BufReader::new(file))
    }

    /// Copies stored weights into a freshly built model of the same shape.
    pub fn load_params<M: SegModel>(template: &mut M, params: &[f32]) -> Result<()> {
        if template.params().len() != params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                template.params().len()
            )));
        }
        template.params_mut().copy_from_slice(params);
        Ok(())
    }

    /// Restores a trainer; `template` supplies the architecture.
    pub fn into_trainer<M: SegModel>(
        self,
        template: M,
        labeled: Vec<SegSample>,
        unlabeled: Vec<SegSample>,
    ) -> Result<Trainer<M>> {
        let mut teacher = template.clone();
        let mut student = template;
        Self::load_params(&mut teacher, &self.teacher)?;
        Self::load_params(&mut student, &self.student)?;
        Trainer::from_parts(
            self.header.snapshot,
            ModelPair::new(teacher, student)?,
            self.teacher_opt,
            self.student_opt,
            self.pseudo,
            labeled,
            unlabeled,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    momentum: f32,
    weight_decay: f32,
    no_decay: Vec<(usize, usize)>,
}

impl OptMeta {
    fn of(s: &Sgd) -> Self {
        Self {
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            no_decay: s.no_decay.clone(),
        }
    }

    fn with_velocity(self, velocity: Vec<f32>) -> Sgd {
        Sgd {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            velocity,
            no_decay: self.no_decay,
        }
    }
}

#[derive(Serialize)]
struct HeaderOnDisk<'a> {
    header: &'a CheckpointHeader,
    teacher_opt: OptMeta,
    student_opt: OptMeta,
}

#[derive(Deserialize)]
struct HeaderOwned {
    header: CheckpointHeader,
    teacher_opt: OptMeta,
    student_opt: OptMeta,
}
