//! Model persistence: a single NPZ archive holding every parameter tensor
//! keyed `stage{t}/{layer}/{weight|bias}`, the canonical shape, the training
//! configuration and the normalization statistics.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Ix1, Ix2, Ix4, OwnedRepr};
use ndarray_npy::{NpzReader, NpzWriter};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::network::{ArchConfig, ConvLayer, Linear, ModelState, StageParams, CONV_NAMES};
use crate::types::{
    ContemptPolicy, EmotionScheme, Frame, LandmarkSet, Point, TrainConfig, NUM_LANDMARKS,
};

const FORMAT_VERSION: f64 = 1.0;

/// A trained model together with everything needed to run it on new data.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub train_config: TrainConfig,
    pub norm_stats: NormStats,
}

fn scalar(v: f64) -> Array1<f64> {
    Array1::from_elem(1, v)
}

/// Writes the checkpoint archive.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut npz = NpzWriter::new(file);
    let wrap = |e: ndarray_npy::WriteNpzError| Error::Checkpoint(e.to_string());

    let model = &ckpt.model;
    let cfg = &ckpt.train_config;
    npz.add_array("meta/format_version", &scalar(FORMAT_VERSION))
        .map_err(wrap)?;
    npz.add_array("meta/classes", &scalar(model.scheme.num_classes() as f64))
        .map_err(wrap)?;
    npz.add_array("meta/stages", &scalar(model.stages.len() as f64))
        .map_err(wrap)?;

    npz.add_array("arch/input_size", &scalar(model.arch.input_size as f64))
        .map_err(wrap)?;
    npz.add_array(
        "arch/channels",
        &Array1::from_iter(model.arch.channels.iter().map(|&c| c as f64)),
    )
    .map_err(wrap)?;
    npz.add_array("arch/fc1_size", &scalar(model.arch.fc1_size as f64))
        .map_err(wrap)?;

    let mut canon = Array2::zeros((NUM_LANDMARKS, 2));
    for (i, p) in model.canonical_shape.points().iter().enumerate() {
        canon[[i, 0]] = p.x;
        canon[[i, 1]] = p.y;
    }
    npz.add_array("canonical_shape", &canon).map_err(wrap)?;

    npz.add_array(
        "norm/stats",
        &Array1::from_vec(vec![ckpt.norm_stats.mean, ckpt.norm_stats.std]),
    )
    .map_err(wrap)?;

    for (key, value) in [
        ("config/alpha", cfg.alpha),
        ("config/beta", cfg.beta),
        ("config/base_lr", cfg.base_lr),
        ("config/max_lr", cfg.max_lr),
        ("config/step_size", cfg.step_size as f64),
        ("config/dropout_p", cfg.dropout_p),
        ("config/stages", cfg.stages as f64),
        ("config/momentum", cfg.momentum),
        ("config/batch_size", cfg.batch_size as f64),
        ("config/epochs", cfg.epochs as f64),
        ("config/patience", cfg.patience as f64),
        ("config/min_delta", cfg.min_delta),
        (
            "config/contempt_policy",
            match cfg.contempt_policy {
                ContemptPolicy::Drop => 0.0,
                ContemptPolicy::AsHappiness => 1.0,
            },
        ),
    ] {
        npz.add_array(key, &scalar(value)).map_err(wrap)?;
    }

    for (t, stage) in model.stages.iter().enumerate() {
        let prefix = format!("stage{}", t + 1);
        for (name, conv) in CONV_NAMES.iter().zip(&stage.convs) {
            npz.add_array(format!("{prefix}/{name}/weight"), &conv.weight)
                .map_err(wrap)?;
            npz.add_array(format!("{prefix}/{name}/bias"), &conv.bias)
                .map_err(wrap)?;
        }
        for (name, lin) in [
            ("fc1", &stage.fc1),
            ("fc2_landmark", &stage.fc2_landmark),
            ("fc2_emotion", &stage.fc2_emotion),
        ] {
            npz.add_array(format!("{prefix}/{name}/weight"), &lin.weight)
                .map_err(wrap)?;
            npz.add_array(format!("{prefix}/{name}/bias"), &lin.bias)
                .map_err(wrap)?;
        }
        if let Some(conn) = &stage.connection {
            npz.add_array(format!("{prefix}/connection/weight"), &conn.weight)
                .map_err(wrap)?;
            npz.add_array(format!("{prefix}/connection/bias"), &conn.bias)
                .map_err(wrap)?;
        }
    }

    npz.finish().map_err(wrap)?;
    Ok(())
}

struct Loader {
    npz: NpzReader<File>,
}

impl Loader {
    fn scalar(&mut self, name: &str) -> Result<f64> {
        let a: Array1<f64> = self.vec1(name)?;
        a.first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("entry {name:?} is empty")))
    }

    fn vec1(&mut self, name: &str) -> Result<Array1<f64>> {
        self.npz
            .by_name::<OwnedRepr<f64>, Ix1>(name)
            .map_err(|e| Error::Checkpoint(format!("cannot read {name:?}: {e}")))
    }

    fn mat2(&mut self, name: &str) -> Result<Array2<f64>> {
        self.npz
            .by_name::<OwnedRepr<f64>, Ix2>(name)
            .map_err(|e| Error::Checkpoint(format!("cannot read {name:?}: {e}")))
    }

    fn linear(&mut self, prefix: &str, name: &str, out: usize, inp: usize) -> Result<Linear> {
        let weight = self.mat2(&format!("{prefix}/{name}/weight"))?;
        let bias = self.vec1(&format!("{prefix}/{name}/bias"))?;
        if weight.dim() != (out, inp) || bias.len() != out {
            return Err(Error::Checkpoint(format!(
                "{prefix}/{name} has shape {:?}/{}, expected ({out}, {inp})/{out}",
                weight.dim(),
                bias.len()
            )));
        }
        Ok(Linear { weight, bias })
    }
}

/// Reads a checkpoint archive and validates every tensor shape against the
/// stored architecture.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let npz = NpzReader::new(file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut loader = Loader { npz };

    let version = loader.scalar("meta/format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let classes = loader.scalar("meta/classes")? as usize;
    let scheme = match classes {
        7 => EmotionScheme::Seven,
        3 => EmotionScheme::Three,
        other => {
            return Err(Error::Checkpoint(format!(
                "checkpoint declares {other} emotion classes; expected 3 or 7"
            )))
        }
    };
    let num_stages = loader.scalar("meta/stages")? as usize;

    let channels_raw = loader.vec1("arch/channels")?;
    if channels_raw.len() != 4 {
        return Err(Error::Checkpoint(format!(
            "arch/channels has {} entries, expected 4",
            channels_raw.len()
        )));
    }
    let arch = ArchConfig {
        input_size: loader.scalar("arch/input_size")? as usize,
        channels: [
            channels_raw[0] as usize,
            channels_raw[1] as usize,
            channels_raw[2] as usize,
            channels_raw[3] as usize,
        ],
        fc1_size: loader.scalar("arch/fc1_size")? as usize,
    };
    arch.validate()?;

    let canon = loader.mat2("canonical_shape")?;
    if canon.dim() != (NUM_LANDMARKS, 2) {
        return Err(Error::Checkpoint(format!(
            "canonical shape has dimensions {:?}",
            canon.dim()
        )));
    }
    let canonical_shape = LandmarkSet::new(
        canon
            .rows()
            .into_iter()
            .map(|r| Point::new(r[0], r[1]))
            .collect(),
        Frame::Canonical,
    )?;

    let norm = loader.vec1("norm/stats")?;
    if norm.len() != 2 {
        return Err(Error::Checkpoint("norm/stats must hold [mean, std]".into()));
    }
    let norm_stats = NormStats {
        mean: norm[0],
        std: norm[1],
    };

    let train_config = TrainConfig {
        alpha: loader.scalar("config/alpha")?,
        beta: loader.scalar("config/beta")?,
        base_lr: loader.scalar("config/base_lr")?,
        max_lr: loader.scalar("config/max_lr")?,
        step_size: loader.scalar("config/step_size")? as usize,
        dropout_p: loader.scalar("config/dropout_p")?,
        stages: loader.scalar("config/stages")? as usize,
        emotion_scheme: scheme,
        momentum: loader.scalar("config/momentum")?,
        batch_size: loader.scalar("config/batch_size")? as usize,
        epochs: loader.scalar("config/epochs")? as usize,
        patience: loader.scalar("config/patience")? as usize,
        min_delta: loader.scalar("config/min_delta")?,
        contempt_policy: if loader.scalar("config/contempt_policy")? == 0.0 {
            ContemptPolicy::Drop
        } else {
            ContemptPolicy::AsHappiness
        },
    };

    let [c1, c2, c3, c4] = arch.channels;
    let plan = [
        (c1, 1),
        (c1, c1),
        (c2, c1),
        (c2, c2),
        (c3, c2),
        (c3, c3),
        (c4, c3),
        (c4, c4),
    ];
    let mut stages = Vec::with_capacity(num_stages);
    for t in 1..=num_stages {
        let prefix = format!("stage{t}");
        let mut convs = Vec::with_capacity(8);
        for (name, &(cout, cin)) in CONV_NAMES.iter().zip(&plan) {
            let weight = loader
                .npz
                .by_name::<OwnedRepr<f64>, Ix4>(&format!("{prefix}/{name}/weight"))
                .map_err(|e| Error::Checkpoint(format!("cannot read {prefix}/{name}: {e}")))?;
            let bias = loader.vec1(&format!("{prefix}/{name}/bias"))?;
            if weight.dim() != (cout, cin, 3, 3) || bias.len() != cout {
                return Err(Error::Checkpoint(format!(
                    "{prefix}/{name} has shape {:?}, expected ({cout}, {cin}, 3, 3)",
                    weight.dim()
                )));
            }
            convs.push(ConvLayer { weight, bias });
        }
        let fc1 = loader.linear(&prefix, "fc1", arch.fc1_size, arch.fc1_input())?;
        let fc2_landmark =
            loader.linear(&prefix, "fc2_landmark", 2 * NUM_LANDMARKS, arch.fc1_size)?;
        let fc2_emotion = loader.linear(&prefix, "fc2_emotion", classes, arch.fc1_size)?;
        let connection = if t > 1 {
            let side = arch.connection_side();
            Some(loader.linear(&prefix, "connection", side * side, arch.fc1_size)?)
        } else {
            None
        };
        stages.push(StageParams {
            convs,
            fc1,
            fc2_landmark,
            fc2_emotion,
            connection,
        });
    }

    Ok(Checkpoint {
        model: ModelState {
            arch,
            scheme,
            stages,
            canonical_shape,
        },
        train_config,
        norm_stats,
    })
}
