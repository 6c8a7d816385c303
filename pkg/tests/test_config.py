import pytest

from bdlab.config import LabConfig, config_to_dict, load_config
from bdlab.errors import ConfigError


def test_defaults():
    lab = load_config()
    assert lab == LabConfig()
    assert lab.train.steps == 1000 and lab.train.balancing.recompute_interval == 50
    assert lab.sweep.seeds == (0, 1, 2) and len(lab.sweep.strategies) == 7
    assert lab.data_understanding.pair_count == 1300 and lab.data_generation.pair_count == 288


def test_sections_and_types(tmp_path):
    text = """
[model]
hidden_dim = 12
[data.generation]
mode = rule_separated
informativeness = 0.5
[train]
steps = 20
[balancing]
strategy = grad_weighted
[sweep]
betas = 0.05, 0.1, 0.2, 0.5
[lab]
eval_pairs = 10
"""
    path = tmp_path / "c.ini"
    path.write_text(text)
    lab = load_config(path)
    assert lab.model.hidden_dim == 12
    assert lab.data_generation.mode == "rule_separated"
    assert lab.train.steps == 20 and lab.train.balancing.strategy == "grad_weighted"
    assert lab.sweep.betas == (0.05, 0.1, 0.2, 0.5)
    assert lab.eval_pairs == 10
    assert config_to_dict(lab)["model"]["hidden_dim"] == 12


@pytest.mark.parametrize(
    "text,field",
    [
        ("[data.understanding]\ninformativeness = 2\n", "data.understanding.informativeness"),
        ("[model]\nwidth = 3\n", "model.width"),
        ("[model]\nhidden_dim = lots\n", "model.hidden_dim"),
        ("[optimizer]\nlr = 1\n", "optimizer"),
        ("[lab]\neval_pairs = 0\n", "lab.eval_pairs"),
        ("[sweep]\nstrategies = naive_joint, gradnorm\n", "sweep.strategies"),
        ("[train]\nbalancing = x\n", "train.balancing"),
    ],
)
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as exc:
        load_config(text=text)
    assert exc.value.field == field


def test_with_data_seed_and_eval_sets():
    lab = LabConfig().with_data_seed(5)
    assert (lab.data_understanding.rng_seed, lab.data_generation.rng_seed) == (5, 6)
    cu, cg = lab.eval_configs()
    assert cu.rng_seed != lab.data_understanding.rng_seed and cu.pair_count == lab.eval_pairs
