import dataclasses

import pytest
import torch

from unireid.config import ModelConfig, RunConfig, SyntheticSpec
from unireid.data import build_vocabulary, generate_synthetic

torch.set_num_threads(2)


def small_model_config(**overrides) -> ModelConfig:
    """A minutes-scale model: full mechanism, tiny widths."""
    base = dict(
        image_height=64, image_width=32, patch_size=8,
        vis_width=32, vis_layers=1, vis_heads=2,
        txt_width=32, txt_layers=1, txt_heads=2,
        joint_dim=32, vocab_size=64, max_text_len=32,
        num_identities=8, id_tokens_per_identity=2, inst_tokens=2,
        inversion_layers=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """One 8-identity synthetic dataset shared by the whole session."""
    root = tmp_path_factory.mktemp("synth")
    spec = SyntheticSpec(n_identities=8, images_per_identity=8, seed=11)
    generate_synthetic(spec, root)
    return root, spec


@pytest.fixture()
def tiny_cfg(synth_root, tmp_path):
    """A fast end-to-end run config bound to the shared dataset."""
    root, spec = synth_root
    cfg = RunConfig()
    cfg.seed = 3
    cfg.data.root = str(root)
    cfg.data.synthetic = dataclasses.replace(spec)
    cfg.model = small_model_config(vocab_size=0, num_identities=0)
    cfg.stage1.epochs = 2
    cfg.stage1.steps_per_epoch = 2
    cfg.stage2.epochs = 3
    cfg.stage2.steps_per_epoch = 2
    cfg.stage2.warmup_epochs = 1
    cfg.output.dir = str(tmp_path / "run")
    return cfg


@pytest.fixture()
def template_vocab():
    """Vocabulary with the template words plus a few attribute words."""
    return build_vocabulary(["red top", "blue pants", "woman walking"])
