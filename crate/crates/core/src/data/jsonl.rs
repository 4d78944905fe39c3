//! Line-delimited JSON scene files.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::scene::{BBox, Proposal, Scene};
use crate::error::{Error, Result};

/// Proposals at or below this class probability are discarded.
pub const DETECTION_THRESHOLD: f64 = 0.7;
/// Most proposals kept per scene, by descending probability.
pub const MAX_OBJECTS: usize = 50;

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    class: String,
    prob: f64,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    image_w: u32,
    image_h: u32,
    background: Vec<f64>,
    proposals: Vec<ProposalRecord>,
    #[serde(default)]
    refs: Vec<String>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            id: s.id.clone(),
            image_w: s.image_w,
            image_h: s.image_h,
            background: s.background.clone(),
            proposals: s
                .proposals
                .iter()
                .map(|p| ProposalRecord {
                    x: p.bbox.x,
                    y: p.bbox.y,
                    w: p.bbox.w,
                    h: p.bbox.h,
                    class: p.label.clone(),
                    prob: p.prob,
                    feature: p.feature.clone(),
                })
                .collect(),
            refs: s.references.clone(),
        }
    }
}

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn select(mut props: Vec<Proposal>) -> Vec<Proposal> {
    props.retain(|p| p.prob > DETECTION_THRESHOLD);
    if props.len() > MAX_OBJECTS {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| props[b].prob.total_cmp(&props[a].prob).then(a.cmp(&b)));
        order.truncate(MAX_OBJECTS);
        order.sort_unstable();
        let mut slots: Vec<Option<Proposal>> = props.into_iter().map(Some).collect();
        props = order.into_iter().filter_map(|i| slots[i].take()).collect();
    }
    props
}

fn parse_line(line: &str, lineno: usize) -> Result<Scene> {
    let bad = |msg: String| Error::Parse { line: lineno, msg };
    let rec: SceneRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
    if rec.image_w == 0 || rec.image_h == 0 {
        return Err(bad(format!("scene `{}` has a zero image dimension", rec.id)));
    }
    let d_feat = rec.background.len();
    let mut props = Vec::with_capacity(rec.proposals.len());
    for (k, p) in rec.proposals.into_iter().enumerate() {
        let bbox = BBox::new(p.x, p.y, p.w, p.h);
        if !bbox.is_valid() {
            return Err(bad(format!("proposal {k} of `{}` has a degenerate box", rec.id)));
        }
        if p.feature.len() != d_feat || !p.feature.iter().all(|v| v.is_finite()) {
            return Err(bad(format!(
                "proposal {k} of `{}` has a feature of length {} (background has {d_feat}) or non-finite values",
                rec.id,
                p.feature.len()
            )));
        }
        props.push(Proposal {
            bbox,
            label: p.class,
            prob: p.prob,
            feature: p.feature,
        });
    }
    let proposals = select(props);
    if proposals.is_empty() {
        return Err(Error::EmptyScene(rec.id));
    }
    Ok(Scene {
        id: rec.id,
        image_w: rec.image_w,
        image_h: rec.image_h,
        proposals,
        background: rec.background,
        references: rec.refs,
    })
}

/// Reads scenes, keeping proposals above the detection threshold (at most
/// [`MAX_OBJECTS`] per scene). Blank lines are skipped.
pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(parse_line(&line, i + 1)?);
    }
    Ok(scenes)
}

pub fn load_proposals(path: impl AsRef<std::path::Path>) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    read_scenes(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(probs: &[f64]) -> String {
        let props: Vec<String> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                format!(r#"{{"x":{},"y":5,"w":2,"h":2,"class":"cat","prob":{p},"feature":[0.5,0.5]}}"#, i + 1)
            })
            .collect();
        format!(
            r#"{{"id":"s","image_w":100,"image_h":50,"background":[1,0],"proposals":[{}],"refs":["a cat"]}}"#,
            props.join(",")
        )
    }

    #[test]
    fn caps_at_fifty_objects() {
        let scenes = read_scenes(line(&[0.9; 60]).as_bytes()).unwrap();
        assert_eq!(scenes[0].proposals.len(), 50);
    }

    #[test]
    fn keeps_the_most_probable() {
        let mut probs = vec![0.8; 55];
        probs[54] = 0.99;
        let s = &read_scenes(line(&probs).as_bytes()).unwrap()[0];
        assert_eq!(s.proposals.len(), 50);
        assert_eq!(s.proposals.last().unwrap().prob, 0.99);
    }

    #[test]
    fn threshold_is_strict() {
        let s = &read_scenes(line(&[0.7, 0.71]).as_bytes()).unwrap()[0];
        assert_eq!(s.proposals.len(), 1);
        assert_eq!(s.proposals[0].prob, 0.71);
    }

    #[test]
    fn empty_scene_is_named() {
        match read_scenes(line(&[0.5]).as_bytes()) {
            Err(Error::EmptyScene(id)) => assert_eq!(id, "s"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = format!("{}\n\n{{not json\n", line(&[0.9]));
        match read_scenes(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_gives_no_scenes() {
        assert!(read_scenes(&b""[..]).unwrap().is_empty());
    }
}
