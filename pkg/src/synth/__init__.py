"""シード付き合成データ（ブロブボリューム + 真値変換）のモジュール。"""

from .scene import (
    Blob,
    SceneSpec,
    TransformSpec,
    TRANSFORM_KINDS,
    blob_centres,
    draw_blobs,
    evaluate_blobs,
    margin_box,
    moved_blob,
    render,
    sample_transform,
    support_inside,
    support_radius,
)
from .generator import (
    MAX_REDRAWS,
    SeriesFrame,
    SynthesisError,
    SyntheticPair,
    generate_pair,
    generate_series,
    make_dataset,
    pair_seeds,
)
from .dataset import (
    content_hash,
    load_dataset,
    load_series,
    read_manifest,
    write_dataset,
    write_series,
)

__all__ = [
    "Blob",
    "SceneSpec",
    "TransformSpec",
    "TRANSFORM_KINDS",
    "blob_centres",
    "draw_blobs",
    "evaluate_blobs",
    "margin_box",
    "moved_blob",
    "render",
    "sample_transform",
    "support_inside",
    "support_radius",
    "MAX_REDRAWS",
    "SeriesFrame",
    "SynthesisError",
    "SyntheticPair",
    "generate_pair",
    "generate_series",
    "make_dataset",
    "pair_seeds",
    "content_hash",
    "load_dataset",
    "load_series",
    "read_manifest",
    "write_dataset",
    "write_series",
]
