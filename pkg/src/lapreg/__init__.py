"""Patient-specific non-rigid point-cloud registration toolkit.

Synthetic deformable dataset generation from a preoperative organ model,
feature-based correspondence prediction, and physics-based elastic
registration on a tetrahedral mesh, tied together by the `lapreg` CLI.
"""

from .arap import (ArapConfig, DeformationConstraints, arap_energy,
                   arap_solve, build_laplacian, gen_compression, gen_lobe)
from .cg import CgResult, conjugate_gradient
from .crop import CameraPose, CropConfig, facing_candidates, sample_camera, visible_crop
from .dataset import (DatasetSample, DeformConfig, PatientConfig,
                      generate_sample, gt_overlap_labels, load_patient,
                      read_sample, write_sample)
from .errors import (ConfigError, CropError, DataError, LapregError,
                     ParseError, SolverError)
from .features import FPFH_DIM, compute_fpfh, estimate_normals
from .fem import (MaterialParams, StiffnessMatrix, assemble_stiffness,
                  element_stiffness)
from .geometry import (KeypointSet, Normalization, PointCloud, RigidTransform,
                       TetMesh, TriMesh, best_fit_rigid, compute_vertex_normals,
                       nearest_neighbors, random_rigid, unit_normalize,
                       voxel_downsample)
from .losses import (focal_matching_loss, overlap_loss, total_loss,
                     weighted_chamfer_loss)
from .matching import (CorrespondenceSet, MatchingConfig, dual_softmax,
                       load_correspondences, match_by_nearest_feature,
                       mutual_nn_threshold, save_correspondences, similarity)
from .metrics import (ErrorStats, MatchMetrics, aggregate, format_table, fre,
                      hausdorff, matching_metrics, tre)
from .meshio import (load_cloud_ply, load_mesh, load_tet, save_cloud_ply,
                     save_mesh_ply, save_tet)
from .network import (LayerWeights, attention, coordinate_mlp,
                      cross_encoder_forward, layer_norm, load_weights,
                      overlap_head, point_to_node_decode, positional_encoding,
                      random_weights, save_weights)
from .registration import (CgOptions, DisplacementField, RegistrationOutcome,
                           RegistrationProblem, register_sample, snap_matches,
                           solve_registration,
                           surface_positions_from_registration)
from .tensorio import read_tensors, write_tensors

__version__ = "0.1.0"
