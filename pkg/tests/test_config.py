import pytest

from fraudgan.config import (
    DESK, ConfigFileError, TrainConfig, desk_config, dump_config, load_config, parse_config_text,
)


def test_defaults_follow_published_schedule():
    cfg = TrainConfig()
    assert (cfg.gen_steps, cfg.disc_epochs, cfg.adv_iterations) == (5, 3, 120)
    assert (cfg.g_pretrain_epochs, cfg.d_pretrain_epochs) == (100, 50)
    assert (cfg.gen_batch, cfg.disc_batch, cfg.T, cfg.gamma, cfg.lam) == (50, 64, 400, 1.0, 1.0)
    assert cfg.rollouts == 16 and cfg.window_sizes() == (1, 2, 3)


def test_desk_preset_overrides():
    cfg = desk_config()
    for key, value in DESK.items():
        assert getattr(cfg, key) == value
    assert desk_config(seed=9).seed == 9


def test_parse_comments_types_and_base():
    cfg = parse_config_text("# desk\nseed = 3\nlam=0.5  # weight\nbaseline = yes\nfeatures = rl,se\n", desk_config())
    assert cfg.seed == 3 and cfg.lam == 0.5 and cfg.baseline is True
    assert cfg.feature_list() == ("rl", "se")
    assert cfg.T == DESK["T"]  # untouched keys keep the base value


def test_dump_then_parse_round_trip(tmp_path):
    cfg = desk_config(seed=11, supervision=0.3, regularizer_on=False, features="mnr")
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize("text", [
    "nonsense = 1",
    "seed 4",
    "seed = four",
    "baseline = maybe",
    "T = 0",
    "C = 3",
    "supervision = 1.0",
    "lam = -1",
    "adv_iterations = -2",
    "disc_optimizer = rmsprop",
    "windows = ,",
])
def test_invalid_config_text(text):
    with pytest.raises(ConfigFileError):
        parse_config_text(text)


def test_flags_are_independent():
    for g in (True, False):
        for d in (True, False):
            for r in (True, False):
                cfg = desk_config(score_in_g=g, score_in_d=d, regularizer_on=r)
                assert (cfg.score_in_g, cfg.score_in_d, cfg.regularizer_on) == (g, d, r)


def test_shipped_config_files_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_config(root / "desk.cfg") == desk_config()
    assert load_config(root / "paper.cfg") == TrainConfig()
