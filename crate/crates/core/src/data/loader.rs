use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{DatasetConfig, RawTrack, Scene, SceneAgent};
use crate::error::{Error, Result};

/// Coordinate dimension and `(scene, agent, frame, position)` rows of one file.
type FileRows = (usize, Vec<(String, String, i64, Vec<f64>)>);

/// Frame, position and index of the originating file.
type FrameRow = (i64, Vec<f64>, usize);

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses one trajectory CSV (`scene_id,frame,agent_id,x,y[,z]`).
/// Returns the coordinate dimension and `(scene, agent, frame, position)` rows.
pub fn read_trajectory_csv(path: &Path) -> Result<FileRows> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let dim = match names.as_slice() {
        ["scene_id", "frame", "agent_id", "x", "y"] => 2,
        ["scene_id", "frame", "agent_id", "x", "y", "z"] => 3,
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("expected header scene_id,frame,agent_id,x,y[,z], got {}", names.join(",")),
            ))
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let frame: i64 = record[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad frame `{}`", &record[1])))?;
        let pos = (3..3 + dim)
            .map(|i| {
                record[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("bad coordinate `{}`", &record[i])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((record[0].to_string(), record[2].to_string(), frame, pos));
    }
    Ok((dim, rows))
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .csv files in {}", dir.display())));
    }
    Ok(files)
}

/// Resamples a scene's tracks onto a shared frame grid.
fn build_scene(scene_id: String, dim: usize, tracks: Vec<RawTrack>, cfg: &DatasetConfig) -> Scene {
    let min = tracks.iter().flat_map(|t| t.frames.first()).min().copied().unwrap_or(0);
    let max = tracks.iter().flat_map(|t| t.frames.last()).max().copied().unwrap_or(0);
    let base = tracks
        .iter()
        .flat_map(|t| t.frames.iter())
        .fold(0, |g, &f| gcd(g, f - min))
        .max(1);
    let step = base * cfg.downsample as i64;
    let frames: Vec<i64> = (0..).map(|k| min + k * step).take_while(|&f| f <= max).collect();
    let agents = tracks
        .into_iter()
        .map(|t| {
            let mut positions = vec![vec![0.0; dim]; frames.len()];
            let mut mask = vec![false; frames.len()];
            for (f, p) in t.frames.iter().zip(t.positions) {
                if (f - min) % step == 0 {
                    let k = ((f - min) / step) as usize;
                    positions[k] = p.iter().map(|v| v * cfg.units_scale).collect();
                    mask[k] = true;
                }
            }
            SceneAgent {
                agent_id: t.agent_id,
                positions,
                mask,
            }
        })
        .filter(|a| a.mask.iter().any(|&m| m))
        .collect();
    Scene {
        scene_id,
        dim,
        frames,
        agents,
    }
}

/// Loads every `.csv` file of `dir` into scenes ordered by scene id.
/// Files are parsed in parallel on the current rayon pool.
pub fn load_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let files = csv_files(dir)?;
    let parsed: Vec<(PathBuf, FileRows)> = files
        .par_iter()
        .map(|p| read_trajectory_csv(p).map(|r| (p.clone(), r)))
        .collect::<Result<_>>()?;

    let dim = parsed[0].1 .0;
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<FrameRow>>> = BTreeMap::new();
    for (fi, (path, (d, rows))) in parsed.iter().enumerate() {
        if *d != dim {
            return Err(Error::Data(format!(
                "{} has {d}-D coordinates but {} has {dim}-D",
                path.display(),
                parsed[0].0.display()
            )));
        }
        for (scene, agent, frame, pos) in rows {
            grouped
                .entry(scene.clone())
                .or_default()
                .entry(agent.clone())
                .or_default()
                .push((*frame, pos.clone(), fi));
        }
    }

    let mut scenes = Vec::with_capacity(grouped.len());
    for (scene_id, agents) in grouped {
        let mut tracks = Vec::with_capacity(agents.len());
        for (agent_id, mut obs) in agents {
            obs.sort_by_key(|o| o.0);
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::Data(format!(
                    "{}: agent {agent_id} in scene {scene_id} has frames that are not strictly increasing (frame {} repeated)",
                    parsed[w[1].2].0.display(),
                    w[1].0
                )));
            }
            tracks.push(RawTrack {
                agent_id,
                frames: obs.iter().map(|o| o.0).collect(),
                positions: obs.into_iter().map(|o| o.1).collect(),
            });
        }
        scenes.push(build_scene(scene_id, dim, tracks, cfg));
    }
    Ok(scenes)
}

/// Writes scenes in the trajectory CSV format, observed steps only.
pub fn write_scenes_csv(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = Vec::new();
    let dim = scenes.first().map_or(2, |s| s.dim);
    let header = if dim == 3 {
        "scene_id,frame,agent_id,x,y,z\n"
    } else {
        "scene_id,frame,agent_id,x,y\n"
    };
    out.extend_from_slice(header.as_bytes());
    for s in scenes {
        for (k, frame) in s.frames.iter().enumerate() {
            for a in &s.agents {
                if !a.mask[k] {
                    continue;
                }
                let coords: Vec<String> = a.positions[k].iter().map(|v| format!("{v}")).collect();
                writeln!(out, "{},{},{},{}", s.scene_id, frame, a.agent_id, coords.join(","))
                    .expect("write to memory");
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn single_agent_scene() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("scene_id,frame,agent_id,x,y\n");
        for f in (0..10).rev() {
            body.push_str(&format!("s0,{f},a,{}.5,0\n", f));
        }
        write(dir.path(), "a.csv", &body);
        let scenes = load_dataset(dir.path(), &DatasetConfig::default()).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].len(), 10);
        assert_eq!(scenes[0].agents.len(), 1);
        assert_eq!(scenes[0].agents[0].positions[3], vec![3.5, 0.0]);
    }

    #[test]
    fn overlapping_agents_share_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("scene_id,frame,agent_id,x,y\n");
        for f in 0..10 {
            body.push_str(&format!("s0,{f},a,{f},0\n"));
        }
        for f in 5..15 {
            body.push_str(&format!("s0,{f},b,0,{f}\n"));
        }
        write(dir.path(), "a.csv", &body);
        let scenes = load_dataset(dir.path(), &DatasetConfig::default()).unwrap();
        let s = &scenes[0];
        assert_eq!(s.len(), 15);
        let expect_a: Vec<bool> = (0..15).map(|k| k < 10).collect();
        let expect_b: Vec<bool> = (0..15).map(|k| k >= 5).collect();
        assert_eq!(s.agents[0].mask, expect_a);
        assert_eq!(s.agents[1].mask, expect_b);
    }

    #[test]
    fn downsample_and_units() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("scene_id,frame,agent_id,x,y,z\n");
        for f in 0..11 {
            body.push_str(&format!("s0,{},a,{f},1,2\n", f * 10));
        }
        write(dir.path(), "a.csv", &body);
        let cfg = DatasetConfig {
            downsample: 5,
            units_scale: 0.5,
            ..Default::default()
        };
        let s = &load_dataset(dir.path(), &cfg).unwrap()[0];
        assert_eq!(s.dim, 3);
        assert_eq!(s.frames, vec![0, 50, 100]);
        assert_eq!(s.agents[0].positions[1], vec![2.5, 0.5, 1.0]);
    }

    #[test]
    fn errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "scene_id,frame,agent_id,x,y\ns0,0,a,1,2\ns0,x,a,1,2\n");
        let err = load_dataset(dir.path(), &DatasetConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.csv:3"), "{msg}");

        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "scene_id,frame,agent_id,x,y\ns0,0,a,1,2\ns0,0,a,1,3\n");
        let err = load_dataset(dir.path(), &DatasetConfig::default()).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"));

        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.csv", "scene_id,frame,agent_id,x,y\ns0,0,a,1,2\n");
        write(dir.path(), "b.csv", "scene_id,frame,agent_id,x,y,z\ns1,0,a,1,2,3\n");
        let err = load_dataset(dir.path(), &DatasetConfig::default()).unwrap_err();
        assert!(err.to_string().contains("3-D"));

        let missing = dir.path().join("nope");
        let err = load_dataset(&missing, &DatasetConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("nope"));
    }
}
