import pytest
import toml

from dataset import WorldConfig, generate_world
from model.model import ModelConfig, init_params

TINY_WORLD = dict(d_id=4, d_content=4, n_primary=64, n_reference=40, n_reference_val=20,
                  n_queries_val=20, n_queries_test=20, query_match_fraction=0.5,
                  n_identities=8, n_targets=1, images_per_identity=16,
                  N_T_train=8, N_T_val=4, N_Tprime_train=3, N_Tprime_val=2,
                  nu_m=0.01, rho_m=0.0, nu_h=0.05, rho_h=0.02, seed=0)
TINY_MODEL = dict(d_in=8, l=4, hidden_sizes=[16])
TINY_TRAINING = dict(epochs=2, b_primary=16, b_secondary=8, p_T=0.5, w=0.2, M=200, mode="dual")


@pytest.fixture
def tiny_world_config():
    return WorldConfig(**TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(WorldConfig(**TINY_WORLD))


@pytest.fixture
def tiny_model():
    return init_params(ModelConfig(**TINY_MODEL), seed=0)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    with open(path, "w") as f:
        toml.dump({"schema_version": 1, "world": TINY_WORLD, "model": TINY_MODEL,
                   "training": TINY_TRAINING, "css": {"k_sweep": [8, 4, 1], "forge_iterations": 50,
                                                      "cover_pool": 20}}, f)
    return str(path)
