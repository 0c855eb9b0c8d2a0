"""固定演算集合に対するリバースモード微分のグラフノード。"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np

logger = logging.getLogger(__name__)

# 上流勾配を受け取り、各親への勾配（不要ならNone）を返す
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradientError(Exception):
    """逆伝播時のエラー（非スカラーの根、NaN検出など）。"""
    pass


class DiffNode:
    """値・親ノード・局所勾配規則を持つ計算グラフのノード。"""

    __slots__ = ("value", "parents", "op", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Tuple["DiffNode", ...] = (),
        op: str = "leaf",
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None
    ):
        """ノードを初期化する。

        Args:
            value: テンソル値（スカラー、ベクトル、行列、場）
            parents: 上流ノード
            op: 局所勾配規則の識別子（エラーメッセージに使用）
            backward_fn: 局所勾配規則
            requires_grad: 勾配を追跡するか（省略時は親から決定）
            name: デバッグ用の名前
        """
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        """スカラー値を返す。"""
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"DiffNode({label}, shape={self.shape})"


def leaf(value, name: Optional[str] = None) -> DiffNode:
    """勾配を追跡する葉ノード（パラメータや入力）を作成する。"""
    return DiffNode(np.array(value, dtype=np.float64), op="leaf", requires_grad=True, name=name)


def constant(value, name: Optional[str] = None) -> DiffNode:
    """勾配を追跡しない定数ノードを作成する。"""
    if isinstance(value, DiffNode):
        return value
    return DiffNode(value, op="constant", requires_grad=False, name=name)


def as_node(value) -> DiffNode:
    """配列やスカラーを定数ノードに包む。"""
    return value if isinstance(value, DiffNode) else constant(value)


def detach(node: DiffNode) -> DiffNode:
    """値をコピーし勾配の流れを止める。"""
    return DiffNode(node.value.copy(), op="detach", requires_grad=False, name=node.name)


class GradientMap:
    """葉ノードから同形状の勾配テンソルへの対応。"""

    def __init__(self):
        self._grads: Dict[int, np.ndarray] = {}
        self._nodes: Dict[int, DiffNode] = {}

    def _set(self, node: DiffNode, grad: np.ndarray) -> None:
        self._grads[id(node)] = grad
        self._nodes[id(node)] = node

    def __getitem__(self, node: DiffNode) -> np.ndarray:
        """葉ノードの勾配を返す（グラフに現れない葉はゼロ）。"""
        if id(node) in self._grads:
            return self._grads[id(node)]
        return np.zeros_like(node.value)

    def __contains__(self, node: DiffNode) -> bool:
        return id(node) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def leaves(self) -> List[DiffNode]:
        return list(self._nodes.values())

    def items(self) -> Iterable[Tuple[DiffNode, np.ndarray]]:
        for key, node in self._nodes.items():
            yield node, self._grads[key]


def _topological_order(root: DiffNode) -> List[DiffNode]:
    """根から到達可能なノードをトポロジカル順に並べる（反復DFS）。"""
    order: List[DiffNode] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: DiffNode) -> GradientMap:
    """スカラー根から全ての葉への勾配を計算する。

    各ノードは逆トポロジカル順に1回だけ訪問される。

    Args:
        root: スカラー値のノード

    Returns:
        GradientMap

    Raises:
        GradientError: 根が非スカラー、または NaN/Inf を検出した場合
    """
    if root.value.size != 1:
        raise GradientError(f"backward requires a scalar root, got shape {root.shape}")

    result = GradientMap()
    if not root.requires_grad:
        return result

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}

    for node in reversed(_topological_order(root)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue

        if node.is_leaf:
            if node.requires_grad:
                result._set(node, grad)
            continue

        parent_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=np.float64)
            if parent_grad.shape != parent.shape:
                parent_grad = parent_grad.reshape(parent.shape)
            if not np.all(np.isfinite(parent_grad)):
                raise GradientError(
                    f"Non-finite gradient produced by op '{node.op}'"
                    + (f" ({node.name})" if node.name else "")
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad

    return result
