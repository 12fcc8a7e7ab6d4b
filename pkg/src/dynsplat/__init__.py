"""View-adaptive dynamic Gaussian splatting.

Fits base 3D Gaussians to multi-view imagery, learns a hypernetwork that
generates one tiny view MLP per Gaussian, and applies pose-conditioned
residual offsets to every Gaussian attribute before rasterization. Ships a
CPU tile rasterizer (compiled kernels with a pure-Python fallback), its own
reverse-mode autodiff, and a synthetic benchmark harness.
"""

from .autodiff import ParamSet, Tensor, backward, fd_check, NotRecorded
from .backend import available_backends, default_backend_name
from .geometry import (BehindCamera, CameraModel, DegenerateInput, PoseW2C,
                       ViewFeature4D, camera_center, pose_feature_4d, project,
                       rotation_from_6d, rotation_to_6d)
from .losses import (LossConfig, MissingProvenance, PrimBehindCamera,
                     ShapeMismatch, metrics, psnr, render_loss,
                     reprojection_loss, ssim, total_loss)
from .raster import (ProjectedGaussian, RenderOptions, RenderedImage,
                     SingularCovariance, composite_reference, ewa_project,
                     project_scene, render)
from .splats import (BadDegree, DegenerateQuaternion, GaussianPrimitive,
                     SplatScene, covariance3d, num_sh_coeffs, sh_basis, sh_eval)
from .synth import (CameraRig, EmptySpec, LightSpec, OrbitSpec, PlaneSpec,
                    SceneSpec, SphereSpec, SyntheticDataset, build_dataset,
                    default_lambertian_spec, default_specular_spec, gt_render,
                    make_rig, make_scene, pixel_anchored_scene)
from .train import (Adam, Diverged, TrainConfig, TrainLog, Variant,
                    ablation_matrix, fit_joint, fit_static, fit_view,
                    init_static_scene, make_hypernet, perturb_pose,
                    pose_errors, recover_poses)
from .viewadapt import (HyperNet, OffsetFlags, OffsetVector, SizeMismatch,
                        ViewMlpWeights, apply_offsets, generate_weights,
                        refine_scene, view_mlp_forward)

__version__ = "0.1.0"
