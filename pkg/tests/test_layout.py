"""Tidy-tree layout: hand-computed cases plus the brute-force property oracle."""

import random

import pytest

from treeline import errors
from treeline.layout import DEFAULT_NODE_BOXES, LayoutConfig, compute_layout
from treeline.model import NodeKind, NodeStatus, ProjectState, apply_event


def build_state(parents: list[int | None], collapsed: set[int] = frozenset(),
                kinds: list[str] | None = None) -> ProjectState:
    """Assemble a ProjectState directly from a parent-index list."""
    state = ProjectState(project_id="layout-test")
    order_per_parent: dict = {}
    for i, parent in enumerate(parents):
        parent_id = None if parent is None else f"n{parent}"
        order = order_per_parent.setdefault(parent_id, iter(range(10_000)))
        kind = NodeKind.INIT if parent is None else NodeKind(
            kinds[i] if kinds else "image")
        apply_event(state, "node_added", {
            "node_id": f"n{i}", "parent_id": parent_id,
            "kind": kind.value, "status": NodeStatus.DRAFT.value,
            "order_key": next(order),
        })
    for i in collapsed:
        apply_event(state, "node_collapsed", {"node_id": f"n{i}", "collapsed": True})
    return state


def uniform_config(width=200, height=100, h=40, v=50) -> LayoutConfig:
    boxes = {kind.value: (width, height) for kind in NodeKind}
    return LayoutConfig(h_spacing=h, v_spacing=v, node_boxes=boxes)


def boxes_of(state: ProjectState, result, config: LayoutConfig):
    out = {}
    for node_id, pos in result.positions.items():
        w, h = config.box(state.nodes[node_id].kind.value)
        out[node_id] = (pos["x"], pos["y"], w, h)
    return out


def check_all_properties(state: ProjectState, config: LayoutConfig):
    """Brute-force verification of every layout postcondition."""
    result = compute_layout(state, config)
    rects = boxes_of(state, result, config)
    visible = {n.node_id for n in state.visible_nodes()}
    assert set(rects) == visible

    # no overlap, O(n^2) pairwise
    items = sorted(rects.items())
    for i in range(len(items)):
        xi, yi, wi, hi = items[i][1]
        for j in range(i + 1, len(items)):
            xj, yj, wj, hj = items[j][1]
            overlap_x = xi < xj + wj and xj < xi + wi
            overlap_y = yi < yj + hj and yj < yi + hi
            assert not (overlap_x and overlap_y), (items[i][0], items[j][0])

    row_pitch = config.row_height + config.v_spacing
    for node_id, (x, y, w, h) in rects.items():
        depth = state.depth_of(node_id)
        assert y == depth * row_pitch  # depth layering

    # same-depth gap, sibling order, parent centering
    for node in state.visible_nodes():
        kids = [] if node.collapsed else state.children_of(node.node_id)
        kid_rects = [rects[k.node_id] for k in kids]
        if kid_rects:
            centers = [x + w / 2 for x, _, w, _ in kid_rects]
            assert all(a < b for a, b in zip(centers, centers[1:]))  # left-to-right
            px, _, pw, _ = rects[node.node_id]
            pc = px + pw / 2
            assert min(centers) - 1e-6 <= pc <= max(centers) + 1e-6  # centering

    by_depth: dict[int, list[tuple[float, float]]] = {}
    for node_id, (x, y, w, h) in rects.items():
        by_depth.setdefault(state.depth_of(node_id), []).append((x, x + w))
    for spans in by_depth.values():
        spans.sort()
        for (l1, r1), (l2, r2) in zip(spans, spans[1:]):
            assert l2 - r1 >= config.h_spacing - 1e-6  # same-depth gap

    # determinism
    again = compute_layout(state, config)
    assert again.to_dict() == result.to_dict()
    return result


class TestHandComputed:
    def test_single_root(self):
        state = build_state([None])
        config = uniform_config()
        result = compute_layout(state, config)
        assert result.positions == {"n0": {"x": -100.0, "y": 0.0}}
        assert result.bounds["width"] == 200 and result.bounds["height"] == 100

    def test_three_children_centers_at_240_spacing(self):
        # width 200 + h_spacing 40 puts sibling centers 240 apart, parent centered
        state = build_state([None, 0, 0, 0])
        config = uniform_config(width=200, h=40)
        result = compute_layout(state, config)
        parent_center = result.positions["n0"]["x"] + 100
        centers = sorted(result.positions[f"n{i}"]["x"] + 100 for i in (1, 2, 3))
        assert centers == [parent_center - 240, parent_center, parent_center + 240]

    def test_empty_project(self):
        state = ProjectState(project_id="empty")
        result = compute_layout(state, uniform_config())
        assert result.positions == {}

    def test_invalid_config(self):
        state = build_state([None])
        with pytest.raises(errors.InvalidConfig):
            compute_layout(state, LayoutConfig(h_spacing=0, v_spacing=10))

    def test_mixed_kind_boxes_respected(self):
        state = build_state([None, 0, 0], kinds=["init", "video", "audio"])
        config = LayoutConfig(h_spacing=30, v_spacing=40)
        result = check_all_properties(state, config)
        vw = DEFAULT_NODE_BOXES["video"][0]
        aw = DEFAULT_NODE_BOXES["audio"][0]
        gap = (result.positions["n2"]["x"]) - (result.positions["n1"]["x"] + vw)
        assert gap >= 30 - 1e-6
        assert vw != aw  # the case actually exercises mixed widths


def random_tree(rng: random.Random, n: int) -> list:
    parents = [None]
    for i in range(1, n):
        parents.append(rng.randrange(0, i))
    return parents


class TestPropertyOracle:
    def test_random_trees_all_postconditions(self):
        rng = random.Random(42)
        for _ in range(25):
            n = rng.randint(1, 60)
            parents = random_tree(rng, n)
            collapsed = {i for i in range(1, n) if rng.random() < 0.15}
            state = build_state(parents, collapsed)
            check_all_properties(state, uniform_config(
                width=rng.choice([80, 200]), height=rng.choice([60, 120]),
                h=rng.choice([20, 40]), v=rng.choice([30, 60])))

    def test_collapse_never_widens(self):
        rng = random.Random(7)
        for _ in range(20):
            n = rng.randint(2, 50)
            parents = random_tree(rng, n)
            state = build_state(parents)
            config = uniform_config()
            base = compute_layout(state, config).bounds["width"]
            target = rng.randrange(1, n)
            apply_event(state, "node_collapsed", {"node_id": f"n{target}", "collapsed": True})
            collapsed_width = compute_layout(state, config).bounds["width"]
            assert collapsed_width <= base + 1e-6

    def test_deep_chain_does_not_blow_stack(self):
        parents = [None] + list(range(0, 700))
        state = build_state(parents)
        result = compute_layout(state, uniform_config())
        assert len(result.positions) == 701
