"""パイプラインで使用する微分可能演算の固定集合。

各演算は順伝播値と局所勾配規則を持つ DiffNode を返す。
入力には DiffNode または numpy 配列（定数として扱う）を渡せる。
"""

from typing import Optional, Sequence, Tuple
import itertools
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit, logsumexp

from .node import DiffNode, GradientError, as_node

logger = logging.getLogger(__name__)

# 固有値ギャップが小さい場合に分母へ加える値
EIGEN_GAP_GUARD = 1e-6


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで拡張された次元について勾配を縮約する。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents, op, backward_fn, name=None) -> DiffNode:
    return DiffNode(value, parents=parents, op=op, backward_fn=backward_fn, name=name)


# ---------------------------------------------------------------------------
# 要素ごとの演算
# ---------------------------------------------------------------------------

def add(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    value = a.value + b.value

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(value, (a, b), "add", backward_fn)


def sub(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    value = a.value - b.value

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(value, (a, b), "sub", backward_fn)


def mul(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    value = a.value * b.value

    def backward_fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(value, (a, b), "mul", backward_fn)


def div(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    value = a.value / b.value

    def backward_fn(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value ** 2), b.shape),
        )

    return _node(value, (a, b), "div", backward_fn)


def neg(a) -> DiffNode:
    a = as_node(a)
    return _node(-a.value, (a,), "neg", lambda g: (-g,))


def scale(a, factor: float) -> DiffNode:
    """定数倍（アフィン結合の係数）。"""
    a = as_node(a)
    factor = float(factor)
    return _node(a.value * factor, (a,), "scale", lambda g: (g * factor,))


def linear_combination(terms: Sequence[DiffNode], weights: Sequence[float]) -> DiffNode:
    """Σ w_i x_i（同形状の項の重み付き和）。"""
    terms = [as_node(t) for t in terms]
    weights = [float(w) for w in weights]
    value = np.zeros_like(terms[0].value)
    for w, t in zip(weights, terms):
        value = value + w * t.value

    def backward_fn(g):
        return tuple(w * g for w in weights)

    return _node(value, tuple(terms), "affine_combine", backward_fn)


def square(a) -> DiffNode:
    a = as_node(a)
    return _node(a.value ** 2, (a,), "square", lambda g: (2.0 * a.value * g,))


def exp(a) -> DiffNode:
    a = as_node(a)
    value = np.exp(a.value)
    return _node(value, (a,), "exp", lambda g: (g * value,))


def log(a) -> DiffNode:
    a = as_node(a)
    value = np.log(a.value)
    return _node(value, (a,), "log", lambda g: (g / a.value,))


def sqrt(a) -> DiffNode:
    a = as_node(a)
    value = np.sqrt(a.value)
    return _node(value, (a,), "sqrt", lambda g: (g / (2.0 * value),))


def sigmoid(a) -> DiffNode:
    a = as_node(a)
    value = expit(a.value)
    return _node(value, (a,), "sigmoid", lambda g: (g * value * (1.0 - value),))


def log_sigmoid(a) -> DiffNode:
    """log σ(x)（大きな |x| でも安定）。"""
    a = as_node(a)
    value = log_expit(a.value)
    return _node(value, (a,), "log_sigmoid", lambda g: (g * expit(-a.value),))


def leaky_relu(a, alpha: float = 0.01) -> DiffNode:
    a = as_node(a)
    positive = a.value > 0.0
    value = np.where(positive, a.value, alpha * a.value)
    return _node(value, (a,), "leaky_relu", lambda g: (np.where(positive, g, alpha * g),))


# ---------------------------------------------------------------------------
# 縮約と形状操作
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> DiffNode:
    a = as_node(a)
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(value, (a,), "sum", backward_fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> DiffNode:
    a = as_node(a)
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    count = a.value.size / max(np.size(value), 1)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _node(value, (a,), "mean", backward_fn)


def reshape(a, shape, order: str = "C") -> DiffNode:
    """形状変更（order="F" で x 最速の線形化）。"""
    a = as_node(a)
    value = a.value.reshape(shape, order=order)
    return _node(value, (a,), "reshape", lambda g: (g.reshape(a.shape, order=order),))


def transpose(a, axes=None) -> DiffNode:
    a = as_node(a)
    value = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(value, (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def getitem(a, key) -> DiffNode:
    """インデックス参照（高度なインデックスでは勾配を加算）。"""
    a = as_node(a)
    value = a.value[key]

    def backward_fn(g):
        grad = np.zeros_like(a.value)
        np.add.at(grad, key, g)
        return (grad,)

    return _node(value, (a,), "getitem", backward_fn)


def stack(nodes: Sequence[DiffNode], axis: int = 0) -> DiffNode:
    nodes = [as_node(n) for n in nodes]
    value = np.stack([n.value for n in nodes], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _node(value, tuple(nodes), "stack", backward_fn)


def concatenate(nodes: Sequence[DiffNode], axis: int = 0) -> DiffNode:
    nodes = [as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(value, tuple(nodes), "concatenate", backward_fn)


def matmul(a, b) -> DiffNode:
    """バッチ対応の行列積（両オペランドとも2次元以上）。"""
    a, b = as_node(a), as_node(b)
    value = np.matmul(a.value, b.value)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(value, (a, b), "matmul", backward_fn)


# ---------------------------------------------------------------------------
# 空間ソフトマックス
# ---------------------------------------------------------------------------

def spatial_softmax(logits) -> DiffNode:
    """最終軸（空間）ごとのソフトマックス。最大値を引いて安定化する。"""
    logits = as_node(logits)
    shifted = logits.value - logits.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (value * (g - (g * value).sum(axis=-1, keepdims=True)),)

    return _node(value, (logits,), "spatial_softmax", backward_fn)


def log_softmax(logits) -> DiffNode:
    """最終軸ごとの log ソフトマックス。"""
    logits = as_node(logits)
    value = logits.value - logsumexp(logits.value, axis=-1, keepdims=True)
    probs = np.exp(value)

    def backward_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _node(value, (logits,), "log_softmax", backward_fn)


# ---------------------------------------------------------------------------
# 3次元畳み込み
# ---------------------------------------------------------------------------

def conv3d(x, weight, bias) -> DiffNode:
    """ゼロパディングで空間サイズを保つ3次元畳み込み（相互相関）。

    Args:
        x: (C_in, nx, ny, nz)
        weight: (C_out, C_in, k, k, k)（k は奇数）
        bias: (C_out,)

    Returns:
        (C_out, nx, ny, nz) のノード
    """
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[0] != c_in:
        raise ValueError(f"conv3d expects {c_in} input channels, got {x.shape[0]}")
    if k % 2 != 1 or weight.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d needs an odd cubic kernel, got {weight.shape[2:]}")
    pad = k // 2
    spatial = x.shape[1:]
    n_vox = int(np.prod(spatial))

    padded = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    # im2col: (N, C_in*k³)
    windows = sliding_window_view(padded, (k, k, k), axis=(1, 2, 3))
    cols = np.ascontiguousarray(
        windows.transpose(1, 2, 3, 0, 4, 5, 6).reshape(n_vox, c_in * k ** 3)
    )
    w_mat = weight.value.reshape(c_out, -1)
    out = cols @ w_mat.T + bias.value
    value = out.T.reshape((c_out,) + spatial)

    def backward_fn(g):
        g_mat = g.reshape(c_out, n_vox)
        gw = (g_mat @ cols).reshape(weight.shape)
        gb = g_mat.sum(axis=1)
        # col2im: 列の勾配を im2col と同じ並びで求め、タップごとに畳み戻す
        g_cols = (g_mat.T @ w_mat).reshape(spatial + (c_in, k, k, k))
        g_cols = np.ascontiguousarray(g_cols.transpose(3, 4, 5, 6, 0, 1, 2))
        gpad = np.zeros_like(padded)
        nx, ny, nz = spatial
        for a, b, d in itertools.product(range(k), repeat=3):
            gpad[:, a:a + nx, b:b + ny, d:d + nz] += g_cols[:, a, b, d]
        gx = gpad[:, pad:pad + nx, pad:pad + ny, pad:pad + nz]
        return gx, gw, gb

    return _node(value, (x, weight, bias), "conv3d", backward_fn)


# ---------------------------------------------------------------------------
# 重み付きモーメントと Gaussian 項
# ---------------------------------------------------------------------------

def first_moment(features, coords: np.ndarray) -> DiffNode:
    """μ_k = Σ_X X F_k(X)。

    Args:
        features: (K, N) の正規化済み特徴
        coords: (N, 3) のボクセル座標（定数）

    Returns:
        (K, 3) のノード
    """
    features = as_node(features)
    coords = np.asarray(coords, dtype=np.float64)
    value = features.value @ coords
    return _node(value, (features,), "first_moment", lambda g: (g @ coords.T,))


def second_moment(features, mu, coords: np.ndarray) -> DiffNode:
    """Σ_k = Σ_X F_k(X)(X−μ_k)(X−μ_k)ᵀ を (Σ+Σᵀ)/2 で対称化して返す。"""
    features, mu = as_node(features), as_node(mu)
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[None, :, :] - mu.value[:, None, :]
    value = np.einsum("kn,kni,knj->kij", features.value, diff, diff)
    value = 0.5 * (value + np.swapaxes(value, -1, -2))

    def backward_fn(g):
        g_sym = 0.5 * (g + np.swapaxes(g, -1, -2))
        g_features = np.einsum("kni,kij,knj->kn", diff, g_sym, diff)
        g_mu = -2.0 * np.einsum("kn,kij,knj->ki", features.value, g_sym, diff)
        return g_features, g_mu

    return _node(value, (features, mu), "second_moment", backward_fn)


def mahalanobis(precision, mu, coords: np.ndarray) -> DiffNode:
    """m_k(X) = (X−μ_k)ᵀ P_k (X−μ_k)。

    Args:
        precision: (K, 3, 3)
        mu: (K, 3)
        coords: (N, 3)

    Returns:
        (K, N) のノード
    """
    precision, mu = as_node(precision), as_node(mu)
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[None, :, :] - mu.value[:, None, :]
    value = np.einsum("kni,kij,knj->kn", diff, precision.value, diff)

    def backward_fn(g):
        g_precision = np.einsum("kn,kni,knj->kij", g, diff, diff)
        p_sym = precision.value + np.swapaxes(precision.value, -1, -2)
        g_mu = -np.einsum("kn,kij,knj->ki", g, p_sym, diff)
        return g_precision, g_mu

    return _node(value, (precision, mu), "mahalanobis", backward_fn)


def inv(a) -> DiffNode:
    """（バッチ）正方行列の逆行列。"""
    a = as_node(a)
    try:
        value = np.linalg.inv(a.value)
    except np.linalg.LinAlgError as e:
        raise GradientError(f"Singular matrix in op 'inv': {e}")
    value_t = np.swapaxes(value, -1, -2)

    def backward_fn(g):
        return (-np.matmul(np.matmul(value_t, g), value_t),)

    return _node(value, (a,), "inv", backward_fn)


def logdet(a) -> DiffNode:
    """（バッチ）正方行列の log|det|。"""
    a = as_node(a)
    sign, value = np.linalg.slogdet(a.value)
    if np.any(sign == 0):
        raise GradientError("Singular matrix in op 'logdet'")
    inv_t = np.swapaxes(np.linalg.inv(a.value), -1, -2)

    def backward_fn(g):
        return (np.asarray(g)[..., None, None] * inv_t,)

    return _node(value, (a,), "logdet", backward_fn)


def pairwise_distances(points) -> DiffNode:
    """k < k' の全ペアのユークリッド距離（上三角順）。

    距離0のペアでは劣勾配0を用いる。
    """
    points = as_node(points)
    i, j = np.triu_indices(points.shape[0], k=1)
    diff = points.value[i] - points.value[j]
    value = np.sqrt(np.sum(diff ** 2, axis=1))

    def backward_fn(g):
        safe = np.where(value > 0.0, value, 1.0)
        unit = np.where((value > 0.0)[:, None], diff / safe[:, None], 0.0)
        contrib = g[:, None] * unit
        grad = np.zeros_like(points.value)
        np.add.at(grad, i, contrib)
        np.add.at(grad, j, -contrib)
        return (grad,)

    return _node(value, (points,), "pairwise_distances", backward_fn)


# ---------------------------------------------------------------------------
# 閉形式の点群フィッティング
# ---------------------------------------------------------------------------

def _horn_matrix(h: np.ndarray) -> np.ndarray:
    """相互共分散 H = Σ a bᵀ から Horn の 4x4 対称行列を作る。"""
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = h
    return np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])


# Horn 行列は H の線形関数なので、基底行列ごとの像を前計算しておく
_HORN_BASIS = np.stack([
    _horn_matrix(np.eye(9)[n].reshape(3, 3)) for n in range(9)
])


def _quaternion_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """∂R/∂q（形状 (4, 3, 3)、q = (w, x, y, z)）。"""
    w, x, y, z = q
    return 2.0 * np.array([
        [[w, -z, y], [z, w, -x], [-y, x, w]],
        [[x, y, z], [y, -x, -w], [z, w, -x]],
        [[-y, x, w], [x, y, z], [-w, z, -y]],
        [[-z, -w, x], [w, -z, y], [x, y, z]],
    ])


def kabsch_rotation(cross_covariance) -> DiffNode:
    """相互共分散 H = Σ (m−m̄)(f−f̄)ᵀ から最適回転 R を求める。

    順伝播は行列式補正付き SVD（Kabsch）、逆伝播は Horn の四元数固有値問題の
    摂動で行う（両者は同じ最適解を与える）。
    """
    h_node = as_node(cross_covariance)
    h = h_node.value
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T

    def backward_fn(g):
        eigvals, eigvecs = np.linalg.eigh(_horn_matrix(h))
        q = eigvecs[:, -1]
        g_q = np.einsum("aij,ij->a", _quaternion_rotation_jacobian(q), g)
        g_n = np.zeros((4, 4))
        for j in range(3):
            gap = eigvals[-1] - eigvals[j]
            if gap < EIGEN_GAP_GUARD:
                gap = gap + EIGEN_GAP_GUARD
            g_n += (eigvecs[:, j] @ g_q) / gap * np.outer(eigvecs[:, j], q)
        g_h = np.einsum("nab,ab->n", _HORN_BASIS, g_n).reshape(3, 3)
        return (g_h,)

    return _node(rotation, (h_node,), "rigid_fit", backward_fn)


def homogeneous(linear, translation) -> DiffNode:
    """3x3 線形ブロックと並進から最終行 (0,0,0,1) の 4x4 行列を作る。"""
    linear, translation = as_node(linear), as_node(translation)
    value = np.eye(4)
    value[:3, :3] = linear.value
    value[:3, 3] = translation.value

    def backward_fn(g):
        return g[:3, :3], g[:3, 3]

    return _node(value, (linear, translation), "homogeneous", backward_fn)


# ---------------------------------------------------------------------------
# 三線形補間によるワープ
# ---------------------------------------------------------------------------

def trilinear_sample(volume, matrix, coords: np.ndarray) -> DiffNode:
    """体積を p = A[:3,:3] x + A[:3,3] で三線形補間サンプルする。

    グリッド外のコーナーは0として読む。

    Args:
        volume: (nx, ny, nz) の強度
        matrix: 4x4 のサンプリング行列（固定側→移動側）
        coords: (N, 3) の出力ボクセル座標（定数）

    Returns:
        (N,) のノード
    """
    volume, matrix = as_node(volume), as_node(matrix)
    coords = np.asarray(coords, dtype=np.float64)
    dims = np.asarray(volume.shape)
    a = matrix.value
    points = coords @ a[:3, :3].T + a[:3, 3]
    base = np.floor(points)
    frac = points - base
    base = base.astype(np.int64)

    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                offset = np.array([dx, dy, dz])
                idx = base + offset
                valid = np.all((idx >= 0) & (idx < dims), axis=1)
                clipped = np.clip(idx, 0, dims - 1)
                values = np.where(valid, volume.value[clipped[:, 0], clipped[:, 1], clipped[:, 2]], 0.0)
                factors = np.where(offset == 1, frac, 1.0 - frac)
                corners.append((offset, clipped, valid, values, factors))

    value = np.zeros(coords.shape[0])
    for _, _, _, values, factors in corners:
        value += values * np.prod(factors, axis=1)

    def backward_fn(g):
        g_volume = np.zeros(volume.shape)
        g_points = np.zeros_like(points)
        for offset, clipped, valid, values, factors in corners:
            weight = np.prod(factors, axis=1)
            np.add.at(
                g_volume,
                (clipped[valid, 0], clipped[valid, 1], clipped[valid, 2]),
                (g * weight)[valid]
            )
            sign = np.where(offset == 1, 1.0, -1.0)
            for axis in range(3):
                others = np.prod(np.delete(factors, axis, axis=1), axis=1)
                g_points[:, axis] += g * values * sign[axis] * others
        g_matrix = np.zeros((4, 4))
        g_matrix[:3, :3] = g_points.T @ coords
        g_matrix[:3, 3] = g_points.sum(axis=0)
        return g_volume, g_matrix

    return _node(value, (volume, matrix), "trilinear_sample", backward_fn)


def nonfinite_check(node: DiffNode, label: Optional[str] = None) -> DiffNode:
    """順伝播値に NaN/Inf があれば演算名付きで失敗する。"""
    if not np.all(np.isfinite(node.value)):
        raise GradientError(f"Non-finite value produced by op '{label or node.op}'")
    return node
