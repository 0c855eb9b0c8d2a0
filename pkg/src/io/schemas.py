"""JSON 成果物のスキーマ（pydantic）。"""

from typing import Dict, List, Optional, Tuple
from enum import Enum

from pydantic import BaseModel, Field, field_validator


class VolumeDtype(str, Enum):
    """ボリューム本体の数値型。"""
    F32 = "f32"


class VolumeOrder(str, Enum):
    """線形化順序。"""
    X_FASTEST = "x-fastest"


class VolumeHeader(BaseModel):
    """`<name>.json` のヘッダー。本体は `<name>.raw`（リトルエンディアン）。"""

    dims: Tuple[int, int, int] = Field(description="グリッド寸法 (nx, ny, nz)")
    dtype: VolumeDtype = Field(default=VolumeDtype.F32, description="本体の数値型")
    order: VolumeOrder = Field(default=VolumeOrder.X_FASTEST, description="線形化順序")

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, dims):
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive: {dims}")
        return dims


class TransformFile(BaseModel):
    """変換 JSON（移動側→固定側の 4x4 行優先行列）。"""

    matrix: List[List[float]] = Field(description="4x4 同次行列")
    kind: Optional[str] = Field(default=None, description="rigid または affine")

    @field_validator("matrix")
    @classmethod
    def _four_by_four(cls, matrix):
        if len(matrix) != 4 or any(len(row) != 4 for row in matrix):
            raise ValueError("matrix must be 4x4")
        return matrix


class ParameterEntry(BaseModel):
    """チェックポイント内の1パラメータ配列。"""

    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    """`checkpoint.json`: `checkpoint.bin` の配列形状と構成。"""

    format: str = Field(default="float64-le", description="本体のバイナリ形式")
    parameters: List[ParameterEntry]
    parameter_count: int = Field(ge=0)
    model: Dict = Field(default_factory=dict, description="ModelConfig")
    grid_dims: Optional[Tuple[int, int, int]] = None
    step: int = Field(default=0, ge=0)


class PairEntry(BaseModel):
    """データセット manifest の1ペア。"""

    index: int
    fixed: str
    moving: str
    transform: str
    scene_seed: int
    transform_seed: int
    gt: List[List[float]]


class SeriesFrameEntry(BaseModel):
    """時系列 manifest の1フレーム。"""

    index: int
    volume: str
    to_first: List[List[float]]


class DatasetManifest(BaseModel):
    """`synth` が書き出す `manifest.json`。"""

    kind: str = Field(description="pairs または series")
    scene: Dict
    transform: Dict
    pairs: List[PairEntry] = Field(default_factory=list)
    frames: List[SeriesFrameEntry] = Field(default_factory=list)
    content_hash: str = Field(description="全ボリューム本体の SHA-256")


class LossRecord(BaseModel):
    """`losses.jsonl` の1行。"""

    step: int = Field(ge=0)
    sim: float
    kl: float
    var: float
    rep: float
    total: float
