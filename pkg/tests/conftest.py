import os

import numpy as np
import pytest
import torch

from latentstack.configs import LossWeights, ModelConfig

# official 40-attribute header, in file order
CELEBA_ATTRIBUTES = (
    "5_o_Clock_Shadow Arched_Eyebrows Attractive Bags_Under_Eyes Bald Bangs "
    "Big_Lips Big_Nose Black_Hair Blond_Hair Blurry Brown_Hair Bushy_Eyebrows "
    "Chubby Double_Chin Eyeglasses Goatee Gray_Hair Heavy_Makeup "
    "High_Cheekbones Male Mouth_Slightly_Open Mustache Narrow_Eyes No_Beard "
    "Oval_Face Pale_Skin Pointy_Nose Receding_Hairline Rosy_Cheeks Sideburns "
    "Smiling Straight_Hair Wavy_Hair Wearing_Earrings Wearing_Hat "
    "Wearing_Lipstick Wearing_Necklace Wearing_Necktie Young"
).split()
CELEBA_ROWS = 202599


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """Small but structurally complete: 4 domains, 2 discriminator scales."""
    return ModelConfig(num_domains=4, image_size=8, latent_channels=4, encoder_depth=1,
                       residual_blocks=1, shared_block_depth=1, discriminator_layers=1,
                       discriminator_scales=2)


@pytest.fixture(scope="session")
def grad_cfg() -> ModelConfig:
    """Small enough for exhaustive finite differences over every parameter."""
    return ModelConfig(num_domains=2, image_size=4, latent_channels=2, encoder_depth=1,
                       residual_blocks=0, shared_block_depth=1, discriminator_layers=1,
                       discriminator_scales=1)


@pytest.fixture()
def tiny_net(tiny_cfg):
    from latentstack.networks import build_networks

    return build_networks(tiny_cfg, seed=7)


def seeded_batches(cfg: ModelConfig, batch_size: int = 2, seed: int = 11,
                   dtype=torch.float32) -> dict[int, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    shape = (batch_size, cfg.channels, cfg.image_size, cfg.image_size)
    return {d: (torch.rand(shape, generator=g, dtype=dtype) * 2 - 1)
            for d in range(cfg.num_domains)}


@pytest.fixture()
def tiny_batches(tiny_cfg):
    return seeded_batches(tiny_cfg)


@pytest.fixture(scope="session")
def default_weights() -> LossWeights:
    return LossWeights()


def _write_celeba_surrogate(path, rows: int) -> None:
    """Attribute file at official scale with seeded labels, official header."""
    rng = np.random.default_rng(20260822)
    # biased columns so every experiment domain is nonempty and asymmetric
    probs = rng.uniform(0.1, 0.9, size=len(CELEBA_ATTRIBUTES))
    values = rng.random((rows, len(CELEBA_ATTRIBUTES))) < probs
    tokens = np.where(values, " 1", "-1")
    with open(path, "w") as fh:
        fh.write(f"{rows}\n")
        fh.write(" ".join(CELEBA_ATTRIBUTES) + "\n")
        for i in range(rows):
            fh.write(f"{i + 1:06d}.jpg " + " ".join(tokens[i]) + "\n")


@pytest.fixture(scope="session")
def celeba_attr_path(tmp_path_factory):
    """The real CelebA attribute list when available, else a same-shape surrogate."""
    override = os.environ.get("CELEBA_ATTR_PATH")
    if override and os.path.exists(override):
        return override
    path = tmp_path_factory.mktemp("celeba") / "list_attr_celeba.txt"
    _write_celeba_surrogate(path, CELEBA_ROWS)
    return str(path)
