"""changekit: self-supervised pixel-wise change detection for rasters."""

__version__ = "0.1.0"

from .changemap import (ChangeProduct, intensity_map, make_change_product,
                        make_histogram, otsu_threshold, rosin_threshold)
from .data import (SyntheticScene, load_raster, load_raster_pair, load_scene,
                   load_scene_set, make_scene_set, save_raster, save_scene,
                   save_scene_set, synth_scene)
from .distill import DistillConfig, StudentBundle, StudentNet, distill
from .errors import (ChangekitError, ConfigError, InputError, ParameterError,
                     ShapeError, TrainingDiverged)
from .losses import (ContrastiveBatch, batch_contrastive_loss, codebook_loss,
                     contrastive_loss, cosine_distance, distill_total,
                     pretrain_total, uncertainty_loss)
from .metrics import Confusion, confusion, scores, scores_table
from .model import (FeatureMap, ModelConfig, ResidualUnit, ResUnet,
                    TeacherBundle, build_model, load_checkpoint,
                    normalize_pixels, parameter_count, save_teacher_checkpoint)
from .pretrain import PretrainConfig, cosine_margin, pretrain
from .quantizer import (GumbelQuantizer, QuantizerConfig, QuantizerOutput,
                        select_probs, usage_histogram)
from .sampling import SegmentMap, felzenszwalb_segment, sample_anchors
from .views import Flip, ViewPair, align_overlap, overlap_mask_a, sample_view_pair
