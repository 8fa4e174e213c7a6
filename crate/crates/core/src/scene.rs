//! Full scene: splats, optional road field and sky, rendered as one
//! differentiable image.

use std::path::Path;

use thiserror::Error;

use crate::compositor::{composite_premultiplied, composite_premultiplied_backward, unpremultiply, RenderOutput};
use crate::geometry::{Camera, Pose};
use crate::img::{Image, Plane};
use crate::roadfield::{read_road_field, write_road_field, RoadError, RoadField, RoadGrad, RoadRenderer, RoadSettings, RoadUpstream};
use crate::sky::{SkyError, SkyMap};
use crate::splat::{
    read_gaussians_ply, write_gaussians_ply, Gaussian3D, GaussianGrad, RasterSettings, SplatError, SplatRenderer,
    SplatUpstream,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Sky(#[from] SkyError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    pub road: Option<RoadField>,
    pub sky: SkyMap,
}

#[derive(Clone, Debug)]
pub struct SceneGrad {
    pub gaussians: Vec<GaussianGrad>,
    pub road: Option<RoadGrad>,
    pub sky: Vec<[f64; 3]>,
}

pub const GAUSSIANS_FILE: &str = "gaussians.ply";
pub const ROAD_FILE: &str = "road.rdf";
pub const SKY_STEM: &str = "sky";

impl Scene {
    /// Writes the splat PLY, road container (if any) and sky texture into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SceneError> {
        std::fs::create_dir_all(dir).map_err(crate::io::fs_err(dir))?;
        write_gaussians_ply(&dir.join(GAUSSIANS_FILE), &self.gaussians)?;
        let road_path = dir.join(ROAD_FILE);
        match &self.road {
            Some(r) => write_road_field(&road_path, r)?,
            None => {
                let _ = std::fs::remove_file(&road_path);
            }
        }
        self.sky.save(&dir.join(SKY_STEM))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let gaussians = read_gaussians_ply(&dir.join(GAUSSIANS_FILE))?;
        let road_path = dir.join(ROAD_FILE);
        let road = if road_path.exists() { Some(read_road_field(&road_path)?) } else { None };
        let sky = SkyMap::load(&dir.join(SKY_STEM))?;
        Ok(Self { gaussians, road, sky })
    }
}

struct CompositeState {
    camera: Camera,
    pose: Pose,
    c_road: Vec<[f64; 3]>,
    o_gs: Vec<f64>,
    o_road: Vec<f64>,
    i_sky: Vec<[f64; 3]>,
}

/// Renders all three layers and keeps what the reverse pass needs.
#[derive(Default)]
pub struct SceneRenderer {
    pub splat: SplatRenderer,
    pub road: RoadRenderer,
    state: Option<CompositeState>,
}

impl SceneRenderer {
    pub fn new(raster: RasterSettings, road: RoadSettings) -> Self {
        Self {
            splat: SplatRenderer::new(raster),
            road: RoadRenderer::new(road),
            state: None,
        }
    }

    pub fn forward(&mut self, scene: &Scene, camera: &Camera, pose: &Pose) -> RenderOutput {
        let (w, h) = (camera.width as usize, camera.height as usize);
        let sl = self.splat.forward(&scene.gaussians, camera, pose);
        let (c_road, o_road, depth_road) = match &scene.road {
            Some(field) => {
                let rl = self.road.forward(field, camera, pose);
                (rl.color, rl.opacity, Some(rl.depth))
            }
            None => (Image::new(w, h), Plane::new(w, h), None),
        };
        let i_sky = scene.sky.render(camera, pose);
        let data = composite_premultiplied(&sl.color.data, &sl.opacity.data, &c_road.data, &o_road.data, &i_sky.data);
        let out = RenderOutput {
            i_gs: unpremultiply(&sl.color, &sl.opacity),
            i_road: unpremultiply(&c_road, &o_road),
            i_sky: i_sky.clone(),
            o_gs: sl.opacity.clone(),
            o_road: o_road.clone(),
            image: Image { width: w, height: h, data },
            depth_gs: Some(sl.depth),
            depth_road,
        };
        self.state = Some(CompositeState {
            camera: *camera,
            pose: *pose,
            c_road: c_road.data,
            o_gs: sl.opacity.data,
            o_road: o_road.data,
            i_sky: i_sky.data,
        });
        out
    }

    /// Gradients of a scalar whose derivative w.r.t. the final image is
    /// `upstream`.
    pub fn backward(&self, scene: &Scene, upstream: &[[f64; 3]]) -> Result<SceneGrad, SceneError> {
        let st = self.state.as_ref().ok_or(SceneError::NoForwardState)?;
        let cg = composite_premultiplied_backward(&st.c_road, &st.o_gs, &st.o_road, &st.i_sky, upstream);
        let gaussians = self.splat.backward(
            &scene.gaussians,
            &SplatUpstream {
                color: &cg.i_gs,
                opacity: &cg.o_gs,
            },
        )?;
        let road = match &scene.road {
            Some(field) => Some(self.road.backward(
                field,
                &RoadUpstream {
                    color: &cg.i_road,
                    opacity: &cg.o_road,
                },
            )?),
            None => None,
        };
        let sky = scene.sky.render_backward(&st.camera, &st.pose, &cg.i_sky);
        Ok(SceneGrad { gaussians, road, sky })
    }
}

/// One-shot render without recording backward state.
pub fn render(scene: &Scene, camera: &Camera, pose: &Pose, raster: RasterSettings, road: RoadSettings) -> RenderOutput {
    SceneRenderer::new(raster, road).forward(scene, camera, pose)
}
