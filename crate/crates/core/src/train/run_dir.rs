//! Run directory layout:
//!
//! | file             | contents                                             |
//! |------------------|------------------------------------------------------|
//! | `run.json`       | method, best epoch, quantizer kind                   |
//! | `config.toml`    | the resolved [`TrainConfig`]                         |
//! | `model.bin`      | autoencoder checkpoint                               |
//! | `codebooks.bin`  | per-output codebooks (scalar quantizers)             |
//! | `allocation.txt` | bit allocation (scalar quantizers)                   |
//! | `vector.bin`     | shared vector codebook (vector baseline)             |
//! | `history.csv`    | `epoch,recon_mse,quant_loss,total_loss,lr,val_nmse_db` |
//! | `refreshes.csv`  | `epoch,step,total_loss,bits` per allocation step     |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, RefreshRecord, SystemQuantizer, TrainConfig, TrainedSystem, VectorQuantizer};
use crate::alloc::BitAllocation;
use crate::error::{Error, Result};
use crate::nn::Autoencoder;
use crate::quantizer::CodebookBank;

const RUN_FORMAT: u32 = 1;
const HISTORY_HEADER: &str = "epoch,recon_mse,quant_loss,total_loss,lr,val_nmse_db";
const REFRESH_HEADER: &str = "epoch,step,total_loss,bits";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    method: String,
    best_epoch: usize,
    quantizer: String,
}

pub fn save_run(sys: &TrainedSystem, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let kind = match &sys.quantizer {
        SystemQuantizer::None => "none",
        SystemQuantizer::Scalar { bank, allocation } => {
            bank.save(dir.join("codebooks.bin"))?;
            allocation.save(dir.join("allocation.txt"))?;
            "scalar"
        }
        SystemQuantizer::Vector(vq) => {
            fs::write(dir.join("vector.bin"), vq.to_bytes())?;
            "vector"
        }
    };
    let manifest = Manifest {
        format: RUN_FORMAT,
        method: sys.method.tag().into(),
        best_epoch: sys.best_epoch,
        quantizer: kind.into(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("run.json"), json + "\n")?;
    fs::write(dir.join("config.toml"), sys.config.to_toml())?;
    fs::write(dir.join("model.bin"), sys.autoencoder.to_bytes())?;

    let mut h = format!("{HISTORY_HEADER}\n");
    for r in &sys.history {
        h.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.recon_mse, r.quant_loss, r.total_loss, r.lr, r.val_nmse_db
        ));
    }
    fs::write(dir.join("history.csv"), h)?;

    let mut f = format!("{REFRESH_HEADER}\n");
    for r in &sys.refreshes {
        let bits: Vec<String> = r.bits.iter().map(|b| b.to_string()).collect();
        let bits = bits.join(" ");
        for (step, loss) in r.loss_history.iter().enumerate() {
            f.push_str(&format!("{},{step},{loss},{bits}\n", r.epoch));
        }
    }
    fs::write(dir.join("refreshes.csv"), f)?;
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<TrainedSystem> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_text(dir, "run.json")?)
        .map_err(|e| Error::Corrupt(format!("run.json: {e}")))?;
    if manifest.format != RUN_FORMAT {
        return Err(Error::Version {
            found: manifest.format,
            expected: RUN_FORMAT,
        });
    }
    let config = TrainConfig::from_toml(&read_text(dir, "config.toml")?)?;
    let method = manifest.method.parse()?;
    let autoencoder = Autoencoder::from_bytes(&read_bytes(dir, "model.bin")?)?;
    let quantizer = match manifest.quantizer.as_str() {
        "none" => SystemQuantizer::None,
        "scalar" => {
            let bank = CodebookBank::from_bytes(&read_bytes(dir, "codebooks.bin")?)?;
            let allocation = BitAllocation::from_text(&read_text(dir, "allocation.txt")?)?;
            bank.check_allocation(&allocation)?;
            SystemQuantizer::Scalar { bank, allocation }
        }
        "vector" => SystemQuantizer::Vector(VectorQuantizer::from_bytes(&read_bytes(
            dir,
            "vector.bin",
        )?)?),
        other => return Err(Error::Corrupt(format!("run.json: unknown quantizer {other:?}"))),
    };
    let latent = autoencoder.latent_dim();
    match &quantizer {
        SystemQuantizer::Scalar { bank, .. } if bank.len() != latent => {
            return Err(Error::Dimension(format!(
                "{} codebooks for {latent} outputs",
                bank.len()
            )))
        }
        SystemQuantizer::Vector(vq) if latent % vq.dim != 0 => {
            return Err(Error::Dimension(format!(
                "vector length {} does not divide {latent}",
                vq.dim
            )))
        }
        _ => {}
    }
    Ok(TrainedSystem {
        method,
        config,
        autoencoder,
        quantizer,
        history: parse_history(&read_text(dir, "history.csv")?)?,
        refreshes: parse_refreshes(&read_text(dir, "refreshes.csv")?)?,
        best_epoch: manifest.best_epoch,
    })
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(name).display())))
}

fn read_bytes(dir: &Path, name: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(name)).map_err(|e| Error::Input(format!("{}: {e}", dir.join(name).display())))
}

fn rows<'a>(text: &'a str, header: &str, file: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Corrupt(format!("{file}: unexpected header")));
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect())
}

fn field<T: std::str::FromStr>(s: &str, file: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Corrupt(format!("{file}: bad field {s:?}")))
}

fn parse_history(text: &str) -> Result<Vec<EpochRecord>> {
    rows(text, HISTORY_HEADER, "history.csv")?
        .into_iter()
        .map(|r| {
            if r.len() != 6 {
                return Err(Error::Corrupt("history.csv: expected 6 columns".into()));
            }
            let f = |i: usize| field::<f64>(r[i], "history.csv");
            Ok(EpochRecord {
                epoch: field(r[0], "history.csv")?,
                recon_mse: f(1)?,
                quant_loss: f(2)?,
                total_loss: f(3)?,
                lr: f(4)?,
                val_nmse_db: f(5)?,
            })
        })
        .collect()
}

fn parse_refreshes(text: &str) -> Result<Vec<RefreshRecord>> {
    const FILE: &str = "refreshes.csv";
    let mut out: Vec<RefreshRecord> = Vec::new();
    for r in rows(text, REFRESH_HEADER, FILE)? {
        if r.len() != 4 {
            return Err(Error::Corrupt(format!("{FILE}: expected 4 columns")));
        }
        let epoch: usize = field(r[0], FILE)?;
        let step: usize = field(r[1], FILE)?;
        let loss: f64 = field(r[2], FILE)?;
        if step == 0 {
            let bits = r[3]
                .split_whitespace()
                .map(|b| field(b, FILE))
                .collect::<Result<Vec<u32>>>()?;
            out.push(RefreshRecord {
                epoch,
                loss_history: Vec::new(),
                bits,
            });
        }
        match out.last_mut() {
            Some(rec) if rec.epoch == epoch && rec.loss_history.len() == step => {
                rec.loss_history.push(loss)
            }
            _ => return Err(Error::Corrupt(format!("{FILE}: steps out of order"))),
        }
    }
    Ok(out)
}
