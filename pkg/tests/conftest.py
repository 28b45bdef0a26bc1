import pytest

from treeline.engine import Engine, EngineConfig
from treeline.model import NodeKind


@pytest.fixture
def engine(tmp_path):
    eng = Engine(EngineConfig(data_dir=tmp_path / "data", fsync=False))
    yield eng
    eng.close()


@pytest.fixture
def project(engine):
    state = engine.create_project("Fixture Project")
    return engine, state.project_id


def make_image_node(engine, project_id, parent_id, prompt="an anchor image", candidates=2):
    """Shortcut: planning child -> manual plan -> materialize -> execute."""
    node = engine.add_child(project_id, parent_id, NodeKind.PLANNING)
    engine.patch_spec(project_id, node.node_id, {"intent_text": prompt})
    engine.plan_manual(project_id, node.node_id, "wf-t2i", prompt,
                       {"num_candidates": candidates})
    engine.materialize(project_id, node.node_id)
    engine.execute_node(project_id, node.node_id, wait=True)
    return engine.state(project_id).node(node.node_id)


def make_audio_node(engine, project_id, parent_id, prompt="calm narration"):
    node = engine.add_child(project_id, parent_id, NodeKind.PLANNING)
    engine.patch_spec(project_id, node.node_id, {"intent_text": prompt})
    engine.plan_manual(project_id, node.node_id, "wf-tts", prompt)
    engine.materialize(project_id, node.node_id)
    engine.execute_node(project_id, node.node_id, wait=True)
    return engine.state(project_id).node(node.node_id)


def make_video_node(engine, project_id, parent_id, image_asset_ids, workflow="wf-i2v",
                    prompt="animate the scene"):
    node = engine.add_child(project_id, parent_id, NodeKind.PLANNING)
    engine.patch_spec(project_id, node.node_id, {"intent_text": prompt})
    engine.plan_manual(project_id, node.node_id, workflow, prompt)
    engine.materialize(project_id, node.node_id,
                       edits={"reference_asset_ids": list(image_asset_ids)})
    engine.execute_node(project_id, node.node_id, wait=True)
    return engine.state(project_id).node(node.node_id)
