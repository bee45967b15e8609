//! On-disk dataset trees in the layout
//! `root/{train,test}/{drone,satellite,roadmap}/<class_id>/*.png`, a
//! synthetic exporter that writes such a tree plus a manifest, and an
//! in-memory form used by training and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use super::image::Image;
use super::render::{render_archive_satellite, render_drone, render_roadmap, RenderOptions};
use super::scene::{generate_scene, mix_seed};
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Drone,
    Satellite,
    Roadmap,
}

impl View {
    pub const ALL: [View; 3] = [View::Drone, View::Satellite, View::Roadmap];

    pub fn name(self) -> &'static str {
        match self {
            View::Drone => "drone",
            View::Satellite => "satellite",
            View::Roadmap => "roadmap",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        View::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Data(format!("unknown view `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: String,
    pub drone: Vec<PathBuf>,
    pub satellite: Vec<PathBuf>,
    pub roadmap: Vec<PathBuf>,
}

impl ClassEntry {
    pub fn paths(&self, view: View) -> &[PathBuf] {
        match view {
            View::Drone => &self.drone,
            View::Satellite => &self.satellite,
            View::Roadmap => &self.roadmap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub split: Split,
    /// Sorted by class id.
    pub classes: Vec<ClassEntry>,
}

impl SplitIndex {
    pub fn drone_count(&self) -> usize {
        self.classes.iter().map(|c| c.drone.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub train: SplitIndex,
    pub test: SplitIndex,
}

/// One file of a dataset tree, with its path relative to the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FileEntry {
    pub class_id: String,
    pub view: View,
    pub path: PathBuf,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> &SplitIndex {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Every indexed file, sorted.
    pub fn entries(&self) -> Vec<FileEntry> {
        let mut out = Vec::new();
        for split in Split::ALL {
            for class in &self.split(split).classes {
                for view in View::ALL {
                    for p in class.paths(view) {
                        out.push(FileEntry {
                            class_id: class.id.clone(),
                            view,
                            path: p.strip_prefix(&self.root).unwrap_or(p).to_path_buf(),
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        out.push(entry.map_err(|e| Error::io(path, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn load_split(root: &Path, split: Split) -> Result<SplitIndex> {
    let split_dir = root.join(split.name());
    let mut per_class: BTreeMap<String, [Vec<PathBuf>; 3]> = BTreeMap::new();
    for (vi, view) in View::ALL.into_iter().enumerate() {
        let view_dir = split_dir.join(view.name());
        if !view_dir.is_dir() {
            continue;
        }
        for class_dir in sorted_dir(&view_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let id = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let files: Vec<PathBuf> = sorted_dir(&class_dir)?.into_iter().filter(|p| is_png(p)).collect();
            per_class.entry(id).or_default()[vi].extend(files);
        }
    }
    let mut classes = Vec::with_capacity(per_class.len());
    for (id, [drone, satellite, roadmap]) in per_class {
        if satellite.is_empty() {
            return Err(Error::Data(format!("{split} class `{id}` has no satellite image")));
        }
        if roadmap.is_empty() {
            return Err(Error::Data(format!("{split} class `{id}` has no roadmap image")));
        }
        if drone.is_empty() {
            warn!("{split} class `{id}` has no drone images");
        }
        classes.push(ClassEntry { id, drone, satellite, roadmap });
    }
    let index = SplitIndex { split, classes };
    if index.classes.is_empty() || index.drone_count() == 0 {
        return Err(Error::Data(format!("{split} split under {} is empty", split_dir.display())));
    }
    Ok(index)
}

pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        train: load_split(root, Split::Train)?,
        test: load_split(root, Split::Test)?,
    })
}

/// Decoded images of one split. Each class contributes its first satellite
/// and first roadmap raster; all drone rasters are kept.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub classes: Vec<String>,
    pub satellite: Vec<Image>,
    /// Further satellite captures per class, after the first.
    pub archive: Vec<Vec<Image>>,
    pub roadmap: Vec<Image>,
    /// `(class index, image)` in index order.
    pub drone: Vec<(usize, Image)>,
}

impl LoadedSplit {
    pub fn from_index(index: &SplitIndex, mode: ExecMode) -> Result<Self> {
        let classes: Vec<String> = index.classes.iter().map(|c| c.id.clone()).collect();
        let gallery = parallel::map(mode, &index.classes, |c| -> Result<(Image, Image, Vec<Image>)> {
            let extra = c.satellite[1..].iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?;
            Ok((Image::load_png(&c.satellite[0])?, Image::load_png(&c.roadmap[0])?, extra))
        });
        let (mut satellite, mut roadmap, mut archive) = (Vec::new(), Vec::new(), Vec::new());
        for entry in gallery {
            let (s, r, extra) = entry?;
            if !s.same_size(&r) || extra.iter().any(|e| !s.same_size(e)) {
                return Err(Error::Data("satellite and roadmap sizes differ".into()));
            }
            satellite.push(s);
            roadmap.push(r);
            archive.push(extra);
        }
        let jobs: Vec<(usize, &PathBuf)> =
            index.classes.iter().enumerate().flat_map(|(ci, c)| c.drone.iter().map(move |p| (ci, p))).collect();
        let drone = parallel::map(mode, &jobs, |(ci, p)| Image::load_png(p).map(|img| (*ci, img)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classes, satellite, archive, roadmap, drone })
    }

    pub fn image_size(&self) -> usize {
        self.satellite[0].width()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Replaces every roadmap with an all-white raster.
    pub fn blank_roadmaps(&mut self) {
        for r in &mut self.roadmap {
            *r = Image::filled(r.width(), r.height(), [1.0; 3]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub size: usize,
    pub seed: u64,
    pub render: RenderOptions,
    /// Test scenes are new locations (class indices `classes..2·classes`)
    /// rather than fresh captures of the training locations.
    pub disjoint_test: bool,
    /// Archive satellite captures per training class; the test split
    /// always gets one capture of its own.
    pub train_captures: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_views == 0 || self.test_views == 0 || self.train_captures == 0 {
            return Err(Error::Config("classes, views and captures per class must be ≥ 1".into()));
        }
        if self.size < 4 {
            return Err(Error::Config(format!("image size {} is too small", self.size)));
        }
        let r = &self.render;
        for (name, v) in [("cloud cover", r.cloud_cover), ("staleness", r.satellite_staleness)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn class_name(class: usize) -> String {
    format!("{class:04}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestLine {
    pub class_id: String,
    pub view: View,
    pub seed: u64,
    pub path: PathBuf,
}

impl ManifestLine {
    pub fn entry(&self) -> FileEntry {
        FileEntry { class_id: self.class_id.clone(), view: self.view, path: self.path.clone() }
    }
}

/// In-memory synthetic split, identical to what [`export_synthetic`] writes.
pub fn synth_split(cfg: &SynthConfig, split: Split, mode: ExecMode) -> Result<(LoadedSplit, Vec<ManifestLine>)> {
    cfg.validate()?;
    let views = match split {
        Split::Train => cfg.train_views,
        Split::Test => cfg.test_views,
    };
    let offset = if split == Split::Test && cfg.disjoint_test { cfg.classes } else { 0 };
    let captures = match split {
        Split::Train => cfg.train_captures,
        Split::Test => 1,
    };
    let per_class = parallel::map_range(mode, cfg.classes, |c| {
        let c = c + offset;
        let scene_seed = mix_seed(&[cfg.seed, c as u64]);
        let scene = generate_scene(c as u64, scene_seed);
        let sat: Vec<Image> = (0..captures)
            .map(|k| render_archive_satellite(&scene, cfg.size, mix_seed(&[split.tag(), k as u64]), &cfg.render))
            .collect();
        let map = render_roadmap(&scene, cfg.size);
        let drones: Vec<(u64, Image)> = (0..views)
            .map(|v| {
                let s = mix_seed(&[cfg.seed, c as u64, split.tag(), v as u64]);
                (s, render_drone(&scene, cfg.size, s, &cfg.render))
            })
            .collect();
        (scene_seed, sat, map, drones)
    });
    let mut out = LoadedSplit {
        classes: Vec::new(),
        satellite: Vec::new(),
        archive: Vec::new(),
        roadmap: Vec::new(),
        drone: Vec::new(),
    };
    let mut manifest = Vec::new();
    for (c, (scene_seed, sat, map, drones)) in per_class.into_iter().enumerate() {
        let id = class_name(c + offset);
        let rel = |view: View, file: String| PathBuf::from(split.name()).join(view.name()).join(&id).join(file);
        for k in 0..sat.len() {
            manifest.push(ManifestLine {
                class_id: id.clone(),
                view: View::Satellite,
                seed: scene_seed,
                path: rel(View::Satellite, format!("{k}.png")),
            });
        }
        manifest.push(ManifestLine {
            class_id: id.clone(),
            view: View::Roadmap,
            seed: scene_seed,
            path: rel(View::Roadmap, "0.png".into()),
        });
        for (v, (s, img)) in drones.into_iter().enumerate() {
            manifest.push(ManifestLine {
                class_id: id.clone(),
                view: View::Drone,
                seed: s,
                path: rel(View::Drone, format!("{v:03}.png")),
            });
            out.drone.push((c, img));
        }
        out.classes.push(id);
        let mut sat = sat.into_iter();
        out.satellite.push(sat.next().expect("one capture"));
        out.archive.push(sat.collect());
        out.roadmap.push(map);
    }
    Ok((out, manifest))
}

fn capture_index(path: &Path) -> usize {
    path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()).expect("own file name")
}

/// Writes both splits and the manifest under `root`. Refuses a non-empty
/// directory unless `force` is set.
pub fn export_synthetic(root: &Path, cfg: &SynthConfig, force: bool, mode: ExecMode) -> Result<Vec<ManifestLine>> {
    cfg.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let mut manifest = Vec::new();
    for split in Split::ALL {
        let (data, lines) = synth_split(cfg, split, mode)?;
        let mut images: Vec<(&PathBuf, &Image)> = Vec::with_capacity(lines.len());
        let mut drone = data.drone.iter();
        for line in &lines {
            let c = data.classes.iter().position(|id| *id == line.class_id).expect("own class");
            let img = match line.view {
                View::Satellite => match capture_index(&line.path) {
                    0 => &data.satellite[c],
                    k => &data.archive[c][k - 1],
                },
                View::Roadmap => &data.roadmap[c],
                View::Drone => &drone.next().expect("drone per line").1,
            };
            images.push((&line.path, img));
        }
        let dirs: BTreeSet<PathBuf> = images.iter().filter_map(|(p, _)| p.parent().map(|d| root.join(d))).collect();
        for d in &dirs {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        parallel::map(mode, &images, |(p, img)| img.save_png(&root.join(p)))
            .into_iter()
            .collect::<Result<Vec<()>>>()?;
        manifest.extend(lines);
    }
    write_manifest(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", l.class_id, l.view, l.seed, l.path.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Data(format!("{}:{}: malformed manifest line", path.display(), n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestLine {
                class_id: f[0].to_string(),
                view: f[1].parse()?,
                seed: f[2].parse().map_err(|_| bad())?,
                path: PathBuf::from(f[3]),
            })
        })
        .collect()
}
