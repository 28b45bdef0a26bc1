"""Deterministic 2-D positions for the visible nodes of a project tree.

First-order tidy layout (Walker's linear-time formulation of the layered
tree-drawing algorithm): subtree contours are merged left to right, siblings
keep creation order, and each parent is centered over its children's span.
Collapsed subtrees contribute only their root, so folding a branch reclaims
horizontal space and never widens the drawing.

Coordinates are abstract pixels for the box top-left corner; rows sit at
``depth * (row_height + v_spacing)`` where row_height is the tallest
configured node box, and horizontal gaps between boxes on the same row are at
least ``h_spacing``. Pan and zoom belong to the frontend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import errors
from .model import NodeKind, ProjectState

DEFAULT_NODE_BOXES: dict[str, tuple[int, int]] = {
    NodeKind.INIT.value: (120, 60),
    NodeKind.INTENT_DRAFT.value: (220, 140),
    NodeKind.PLANNING.value: (220, 160),
    NodeKind.IMAGE.value: (240, 200),
    NodeKind.VIDEO.value: (260, 200),
    NodeKind.AUDIO.value: (240, 160),
}


@dataclass(frozen=True)
class LayoutConfig:
    h_spacing: int = 60
    v_spacing: int = 90
    node_boxes: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_NODE_BOXES))

    def validate(self) -> None:
        if self.h_spacing <= 0 or self.v_spacing <= 0:
            raise errors.InvalidConfig("spacing values must be > 0")
        for kind in NodeKind:
            box = self.node_boxes.get(kind.value)
            if not box or box[0] <= 0 or box[1] <= 0:
                raise errors.InvalidConfig(f"node box for {kind.value} must be positive")

    def box(self, kind: str) -> tuple[int, int]:
        return self.node_boxes[kind]

    @property
    def row_height(self) -> int:
        return max(h for _, h in self.node_boxes.values())


@dataclass
class LayoutResult:
    positions: dict[str, dict[str, float]]  # node_id -> {x, y} of box top-left
    bounds: dict[str, float]  # min_x, min_y, width, height

    def to_dict(self) -> dict:
        return {"positions": self.positions, "bounds": self.bounds}


class _LayoutNode:
    __slots__ = ("node_id", "width", "depth", "children", "parent", "prelim", "mod",
                 "shift", "change", "thread", "ancestor", "sibling_index", "x")

    def __init__(self, node_id: str, width: float, depth: int):
        self.node_id = node_id
        self.width = width
        self.depth = depth
        self.children: list[_LayoutNode] = []
        self.parent: Optional[_LayoutNode] = None
        self.prelim = 0.0
        self.mod = 0.0
        self.shift = 0.0
        self.change = 0.0
        self.thread: Optional[_LayoutNode] = None
        self.ancestor: _LayoutNode = self
        self.sibling_index = 0
        self.x = 0.0


def _build_visible(state: ProjectState, config: LayoutConfig) -> Optional[_LayoutNode]:
    if state.root_id is None:
        return None
    if state.root_id not in state.nodes:
        raise errors.CorruptTree("root id points at a missing node")

    def build(node_id: str, depth: int) -> _LayoutNode:
        node = state.nodes[node_id]
        ln = _LayoutNode(node_id, config.box(node.kind.value)[0], depth)
        if not node.collapsed:
            for child in state.children_of(node_id):
                cn = build(child.node_id, depth + 1)
                cn.parent = ln
                cn.sibling_index = len(ln.children)
                ln.children.append(cn)
        return ln

    return build(state.root_id, 0)


def _separation(left: _LayoutNode, right: _LayoutNode, h_spacing: float) -> float:
    # prelim values are box centers; neighboring boxes keep at least h_spacing
    return (left.width + right.width) / 2 + h_spacing


def _next_left(v: _LayoutNode) -> Optional[_LayoutNode]:
    return v.children[0] if v.children else v.thread


def _next_right(v: _LayoutNode) -> Optional[_LayoutNode]:
    return v.children[-1] if v.children else v.thread


def _move_subtree(wl: _LayoutNode, wr: _LayoutNode, shift: float) -> None:
    subtrees = wr.sibling_index - wl.sibling_index
    wr.change -= shift / subtrees
    wr.shift += shift
    wl.change += shift / subtrees
    wr.prelim += shift
    wr.mod += shift


def _ancestor(vil: _LayoutNode, v: _LayoutNode, default: _LayoutNode) -> _LayoutNode:
    if vil.ancestor.parent is v.parent:
        return vil.ancestor
    return default


def _apportion(v: _LayoutNode, default_ancestor: _LayoutNode, h_spacing: float) -> _LayoutNode:
    if v.sibling_index == 0:
        return default_ancestor
    w = v.parent.children[v.sibling_index - 1]
    vip = vop = v
    vim = w
    vom = v.parent.children[0]
    sip, sop = vip.mod, vop.mod
    sim, som = vim.mod, vom.mod
    while _next_right(vim) is not None and _next_left(vip) is not None:
        vim = _next_right(vim)
        vip = _next_left(vip)
        vom = _next_left(vom)
        vop = _next_right(vop)
        vop.ancestor = v
        shift = (vim.prelim + sim) - (vip.prelim + sip) + _separation(vim, vip, h_spacing)
        if shift > 0:
            _move_subtree(_ancestor(vim, v, default_ancestor), v, shift)
            sip += shift
            sop += shift
        sim += vim.mod
        sip += vip.mod
        som += vom.mod
        sop += vop.mod
    if _next_right(vim) is not None and _next_right(vop) is None:
        vop.thread = _next_right(vim)
        vop.mod += sim - sop
    if _next_left(vip) is not None and _next_left(vom) is None:
        vom.thread = _next_left(vip)
        vom.mod += sip - som
        default_ancestor = v
    return default_ancestor


def _execute_shifts(v: _LayoutNode) -> None:
    shift = change = 0.0
    for child in reversed(v.children):
        child.prelim += shift
        child.mod += shift
        change += child.change
        shift += child.shift + change


def _first_walk(v: _LayoutNode, h_spacing: float) -> None:
    if not v.children:
        if v.sibling_index > 0:
            left = v.parent.children[v.sibling_index - 1]
            v.prelim = left.prelim + _separation(left, v, h_spacing)
        else:
            v.prelim = 0.0
        return
    default_ancestor = v.children[0]
    for child in v.children:
        _first_walk(child, h_spacing)
        default_ancestor = _apportion(child, default_ancestor, h_spacing)
    _execute_shifts(v)
    midpoint = (v.children[0].prelim + v.children[-1].prelim) / 2
    if v.sibling_index > 0:
        left = v.parent.children[v.sibling_index - 1]
        v.prelim = left.prelim + _separation(left, v, h_spacing)
        v.mod = v.prelim - midpoint
    else:
        v.prelim = midpoint


def _second_walk(v: _LayoutNode, m: float) -> None:
    v.x = v.prelim + m
    for child in v.children:
        _second_walk(child, m + v.mod)


def compute_layout(state: ProjectState, config: LayoutConfig | None = None) -> LayoutResult:
    """Positions for every visible node plus the enclosing bounds."""
    if config is None:
        config = LayoutConfig(
            h_spacing=int(state.layout_config.get("h_spacing", 60)),
            v_spacing=int(state.layout_config.get("v_spacing", 90)),
        )
    config.validate()

    # The walks recurse once per level; keep headroom for degenerate chains.
    import sys
    needed = 6 * len(state.nodes) + 200
    if sys.getrecursionlimit() < needed:
        sys.setrecursionlimit(needed)

    root = _build_visible(state, config)
    if root is None:
        return LayoutResult(positions={}, bounds={"min_x": 0, "min_y": 0, "width": 0, "height": 0})

    _first_walk(root, float(config.h_spacing))
    _second_walk(root, -root.prelim)

    row_pitch = config.row_height + config.v_spacing
    positions: dict[str, dict[str, float]] = {}
    min_x = min_y = float("inf")
    max_x = max_y = float("-inf")

    def emit(v: _LayoutNode) -> None:
        nonlocal min_x, min_y, max_x, max_y
        node = state.nodes[v.node_id]
        w, h = config.box(node.kind.value)
        x = v.x - w / 2
        y = float(v.depth * row_pitch)
        positions[v.node_id] = {"x": x, "y": y}
        min_x = min(min_x, x)
        min_y = min(min_y, y)
        max_x = max(max_x, x + w)
        max_y = max(max_y, y + h)
        for child in v.children:
            emit(child)

    emit(root)
    return LayoutResult(
        positions=positions,
        bounds={"min_x": min_x, "min_y": min_y, "width": max_x - min_x, "height": max_y - min_y},
    )
