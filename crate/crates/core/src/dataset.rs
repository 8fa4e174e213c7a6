//! Posed image collections and their on-disk layout:
//!
//! ```text
//! <root>/images/<id>.png
//! <root>/depth/<id>.pfm      (optional)
//! <root>/poses.txt           id tx ty tz qw qx qy qz
//! <root>/camera.cfg          TOML intrinsics
//! <root>/split.cfg           TOML lists of ids per split
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{read_pose_file, write_pose_file, Camera, GeometryError, Pose, PoseRecord};
use crate::img::{Image, Plane};
use crate::io::{fs_err, read_pfm_gray, read_png, read_toml, write_pfm_gray, write_png, write_toml, IoError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: String,
    pub pose: Pose,
    pub image: Image,
    /// Camera-z depth; 0 marks pixels without a surface.
    pub depth: Option<Plane>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    pub train: Vec<View>,
    pub test_interp: Vec<View>,
    pub test_extrap: Vec<View>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Split {
    train: Vec<String>,
    test_interp: Vec<String>,
    test_extrap: Vec<String>,
}

impl Dataset {
    pub fn train_poses(&self) -> Vec<Pose> {
        self.train.iter().map(|v| v.pose).collect()
    }

    pub fn all_views(&self) -> impl Iterator<Item = &View> {
        self.train.iter().chain(&self.test_interp).chain(&self.test_extrap)
    }

    pub fn save(&self, root: &Path) -> Result<(), DatasetError> {
        let images = root.join("images");
        let depth = root.join("depth");
        std::fs::create_dir_all(&images).map_err(fs_err(&images))?;
        let mut records = Vec::new();
        for v in self.all_views() {
            write_png(&images.join(format!("{}.png", v.id)), &v.image)?;
            if let Some(d) = &v.depth {
                std::fs::create_dir_all(&depth).map_err(fs_err(&depth))?;
                write_pfm_gray(&depth.join(format!("{}.pfm", v.id)), d)?;
            }
            records.push(PoseRecord {
                id: v.id.clone(),
                pose: v.pose,
            });
        }
        write_pose_file(&root.join("poses.txt"), &records)?;
        self.camera.save(&root.join("camera.cfg"))?;
        let ids = |vs: &[View]| vs.iter().map(|v| v.id.clone()).collect();
        let split = Split {
            train: ids(&self.train),
            test_interp: ids(&self.test_interp),
            test_extrap: ids(&self.test_extrap),
        };
        write_toml(&root.join("split.cfg"), &split)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let camera = Camera::load(&root.join("camera.cfg"))?;
        camera.validate()?;
        let poses: HashMap<String, Pose> = read_pose_file(&root.join("poses.txt"))?
            .into_iter()
            .map(|r| (r.id, r.pose))
            .collect();
        let split: Split = read_toml(&root.join("split.cfg"))?;
        let load_view = |id: &String| -> Result<View, DatasetError> {
            let pose = *poses
                .get(id)
                .ok_or_else(|| DatasetError::Invalid(format!("no pose for view {id}")))?;
            let image = read_png(&root.join("images").join(format!("{id}.png")))?;
            if image.width != camera.width as usize || image.height != camera.height as usize {
                return Err(DatasetError::Invalid(format!("image {id} does not match the camera resolution")));
            }
            let dpath = root.join("depth").join(format!("{id}.pfm"));
            let depth = if dpath.exists() { Some(read_pfm_gray(&dpath)?) } else { None };
            Ok(View {
                id: id.clone(),
                pose,
                image,
                depth,
            })
        };
        let load_all = |ids: &[String]| ids.iter().map(load_view).collect::<Result<Vec<_>, _>>();
        let ds = Dataset {
            camera,
            train: load_all(&split.train)?,
            test_interp: load_all(&split.test_interp)?,
            test_extrap: load_all(&split.test_extrap)?,
        };
        if ds.train.is_empty() {
            return Err(DatasetError::Invalid("no training views".into()));
        }
        Ok(ds)
    }
}
