//! Comparison data for external plotting: contour CSVs, raw mel matrices
//! and grayscale PGM heatmaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{write_matrix, MelSpectrogram};
use crate::error::{io_err, Error, Result};

use super::{extract_energy, extract_pitch_contour};

/// A generated mel and its ground truth, frame-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPair {
    pub id: String,
    pub generated: MelSpectrogram,
    pub ground_truth: MelSpectrogram,
}

/// Writes, per pair, `{id}.csv` (frame, pitch_gen, pitch_gt, energy_gen,
/// energy_gt), `{id}.gen.mel` / `{id}.gt.mel` matrices and, when `heatmaps`
/// is set, `{id}.gen.pgm` / `{id}.gt.pgm`. Returns the written paths.
pub fn export_plot_data(pairs: &[PlotPair], dir: &Path, heatmaps: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for p in pairs {
        let (g, t) = (&p.generated, &p.ground_truth);
        if g.frames != t.frames || g.bins != t.bins {
            return Err(Error::Shape(format!(
                "pair `{}`: generated {}x{} vs ground truth {}x{}",
                p.id, g.frames, g.bins, t.frames, t.bins
            )));
        }
        let (pg, pt) = (extract_pitch_contour(g)?, extract_pitch_contour(t)?);
        let (eg, et) = (extract_energy(g)?, extract_energy(t)?);
        let csv_path = dir.join(format!("{}.csv", p.id));
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["frame", "pitch_gen", "pitch_gt", "energy_gen", "energy_gt"])?;
        for f in 0..g.frames {
            w.write_record([
                f.to_string(),
                pg[f].to_string(),
                pt[f].to_string(),
                eg[f].to_string(),
                et[f].to_string(),
            ])?;
        }
        w.flush().map_err(io_err(&csv_path))?;
        written.push(csv_path);
        for (tag, mel) in [("gen", g), ("gt", t)] {
            let path = dir.join(format!("{}.{tag}.mel", p.id));
            write_matrix(&path, mel.frames, mel.bins, &mel.data)?;
            written.push(path);
            if heatmaps {
                let path = dir.join(format!("{}.{tag}.pgm", p.id));
                fs::write(&path, heatmap_pgm(mel)).map_err(io_err(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Binary PGM with time on x and low bins at the bottom, scaled to the mel's range.
fn heatmap_pgm(mel: &MelSpectrogram) -> Vec<u8> {
    let lo = mel.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = mel.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", mel.frames, mel.bins).into_bytes();
    for b in (0..mel.bins).rev() {
        for f in 0..mel.frames {
            out.push((((mel.get(f, b) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusSpec};

    fn read(path: &Path) -> Vec<Vec<f64>> {
        let mut r = csv::Reader::from_path(path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["frame", "pitch_gen", "pitch_gt", "energy_gen", "energy_gt"]);
        r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect()
    }

    #[test]
    fn identical_pair_round_trips() {
        let u = generate_synthetic_corpus(&CorpusSpec { n_utterances: 1, ..Default::default() }).unwrap().remove(0);
        let pair = PlotPair { id: u.id.clone(), generated: u.mel.clone(), ground_truth: u.mel.clone() };
        let dir = tempfile::tempdir().unwrap();
        let files = export_plot_data(&[pair], dir.path(), true).unwrap();
        assert_eq!(files.len(), 5);
        let rows = read(&files[0]);
        assert_eq!(rows.len(), u.mel.frames);
        let energy = extract_energy(&u.mel).unwrap();
        for (f, row) in rows.iter().enumerate() {
            assert_eq!(row[0], f as f64);
            assert_eq!(row[1], row[2]);
            assert_eq!(row[3], row[4]);
            assert!((row[3] - energy[f] as f64).abs() < 1e-6);
        }
        let pgm = fs::read(dir.path().join(format!("{}.gt.pgm", u.id))).unwrap();
        let header = format!("P5\n{} 80\n255\n", u.mel.frames);
        assert_eq!(pgm.len(), header.len() + 80 * u.mel.frames);
    }

    #[test]
    fn misaligned_pair_is_rejected() {
        let pair = PlotPair {
            id: "x".into(),
            generated: MelSpectrogram::zeros(3, 80),
            ground_truth: MelSpectrogram::zeros(4, 80),
        };
        assert!(export_plot_data(&[pair], tempfile::tempdir().unwrap().path(), false).is_err());
    }
}
