"""Vector-quantized feature fields.

Dense per-pixel feature maps are compressed into one shared codebook per
scale plus an integer index map per image, so that a text query scores only
the codebook and broadcasts through the indices.
"""

from .errors import BuildError, FormatError, NotFoundError, VqffError
from .feature_io import (
    FeatureMap,
    SceneManifest,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_feature_map,
    normalize_features,
    save_feature_map,
)
from .quantizer_global import GlobalBuildParams, SuperpixelParams, build_from_scene, build_vqff, spherical_kmeans
from .quantizer_local import quantize_patch, quantize_superpixel, spherical_mean
from .query_engine import QueryContext, QueryEngine, scene_query
from .semantic_lift import compose_edit, select_frames
from .superpixel import Segmentation, slic_segment
from .vqff_store import VqffStore, cosine_fidelity, load_store, save_store, store_stats

__version__ = "0.1.0"

__all__ = [
    "BuildError",
    "FeatureMap",
    "FormatError",
    "GlobalBuildParams",
    "NotFoundError",
    "QueryContext",
    "QueryEngine",
    "SceneManifest",
    "Segmentation",
    "SuperpixelParams",
    "SyntheticSceneSpec",
    "VqffError",
    "VqffStore",
    "build_from_scene",
    "build_vqff",
    "compose_edit",
    "cosine_fidelity",
    "generate_synthetic_scene",
    "load_feature_map",
    "load_store",
    "normalize_features",
    "quantize_patch",
    "quantize_superpixel",
    "save_feature_map",
    "save_store",
    "scene_query",
    "select_frames",
    "slic_segment",
    "spherical_kmeans",
    "spherical_mean",
    "store_stats",
]
