import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from flowebm import pipeline
from flowebm.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from flowebm.config import RunConfig
from flowebm.energy import MLPEnergy
from flowebm.flow import FlowModel
from flowebm.io import load_chains, load_checkpoint, read_table, save_checkpoint

TINY = """\
[run]
seed = 3
[target]
samples = 2000
[flow]
size = desk
iterations = 150
batch_size = 128
lr = 0.005
[energy]
hidden = 16,16
[trainer]
iterations = 15
batch_size = 32
mcmc_steps = 5
[sampler]
chains = 4
steps = 300
burn_in = 50
[diagnose]
acf_lag = 20
max_lag = 50
[interpolate]
steps = 300
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A trained tiny run directory: flow, NT energy and latent-HMC chains."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    out = root / "run"
    assert run("train-flow", "--config", cfg, "--out", out) == EXIT_OK
    assert run("train-ebm", "--config", cfg, "--out", out) == EXIT_OK
    assert run("sample", "--config", cfg, "--out", out) == EXIT_OK
    return cfg, out


def energy_distance_pvalue(a, b, permutations=200, seed=0):
    """Permutation p-value of the two-sample energy statistic."""
    pooled = np.concatenate([a, b])
    dist = cdist(pooled, pooled)
    n = len(a)

    def stat(idx):
        ia, ib = idx[:n], idx[n:]
        return 2 * dist[np.ix_(ia, ib)].mean() - dist[np.ix_(ia, ia)].mean() - dist[np.ix_(ib, ib)].mean()

    rng = np.random.default_rng(seed)
    base = np.arange(len(pooled))
    observed = stat(base)
    exceed = sum(stat(rng.permutation(base)) >= observed for _ in range(permutations))
    return (exceed + 1) / (permutations + 1)


class TestPipelineCommands:
    def test_outputs_written(self, tiny):
        _, out = tiny
        for name in ("config.ini", "flow.ckpt", "flow_trace.csv", "energy.ckpt", "ebm_trace.csv",
                     "chains_z.csv", "chains_x.csv"):
            assert (out / name).exists(), name
        assert len(read_table(out / "flow_trace.csv")["nll"]) == 150
        assert len(read_table(out / "ebm_trace.csv")["gap"]) == 15

    def test_chain_dump_shapes(self, tiny):
        _, out = tiny
        z = load_chains(out / "chains_z.csv")
        x = load_chains(out / "chains_x.csv")
        assert z.positions.shape == x.positions.shape == (4, 300, 2)
        assert z.space == "z" and x.space == "x"
        flow = load_checkpoint(out / "flow.ckpt")
        np.testing.assert_allclose(flow.push(z.positions.reshape(-1, 2)), x.positions.reshape(-1, 2), atol=1e-12)

    def test_diagnose(self, tiny, tmp_path, capsys):
        cfg, out = tiny
        assert run("diagnose", out / "chains_z.csv", out / "chains_x.csv", "--config", cfg,
                   "--out", tmp_path) == EXIT_OK
        text = (tmp_path / "summary.txt").read_text()
        assert "[chains_z]" in text and "[chains_x]" in text and "mean R-hat" in text
        assert "modes visited" in text
        assert len(read_table(tmp_path / "rhat_chains_x.csv")["rhat"]) == 2
        assert read_table(tmp_path / "autocorr_chains_z.csv")["lag"][0] == 0

    def test_diagnose_refuses_single_chain(self, tiny, tmp_path):
        cfg, out = tiny
        one = tmp_path / "one.csv"
        lines = (out / "chains_z.csv").read_text().splitlines()
        one.write_text("\n".join([lines[0]] + [l for l in lines[1:] if l.startswith("0,")]) + "\n")
        assert run("diagnose", one, "--config", cfg, "--out", tmp_path) == EXIT_OK
        text = (tmp_path / "summary.txt").read_text()
        assert "R-hat: REFUSED" in text
        assert not (tmp_path / "rhat_one.csv").exists()

    def test_data_space_samplers(self, tiny, tmp_path):
        cfg, out = tiny
        for sampler in ("data-langevin", "data-hmc"):
            dest = tmp_path / sampler
            dest.mkdir()
            for name in ("flow.ckpt", "energy.ckpt"):
                (dest / name).write_bytes((out / name).read_bytes())
            assert run("sample", "--config", cfg, "--out", dest, "--sampler", sampler) == EXIT_OK
            ens = load_chains(dest / "chains_x.csv")
            assert ens.positions.shape == (4, 300, 2)
            assert np.isfinite(ens.positions).all()
            assert "kind = " + sampler in (dest / "config.ini").read_text()

    def test_interpolate(self, tiny, capsys):
        cfg, out = tiny
        assert run("interpolate", "--config", cfg, "--out", out, "--z1=-1,0", "--z2=1,0.5") == EXIT_OK
        cols = read_table(out / "interpolation.csv")
        assert len(cols["z0"]) == 301
        assert (cols["z0"][0], cols["z1"][0]) == (-1.0, 0.0)
        assert math.hypot(cols["z0"][-1] - 1, cols["z1"][-1] - 0.5) < 0.3
        assert "log-density band" in capsys.readouterr().out

    def test_interpolate_without_magnet_wanders(self, tiny, tmp_path):
        cfg, out = tiny
        text = TINY.replace("[interpolate]\n", "[interpolate]\ngamma = 0.0\n")
        (tmp_path / "g0.ini").write_text(text)
        for name in ("flow.ckpt", "energy.ckpt"):
            (tmp_path / name).write_bytes((out / name).read_bytes())
        assert run("interpolate", "--config", tmp_path / "g0.ini", "--out", tmp_path, "--z1=-2,0", "--z2=2,0") == EXIT_OK
        cols = read_table(tmp_path / "interpolation.csv")
        assert math.hypot(cols["z0"][-1] - 2, cols["z1"][-1]) > 1.0


class TestReproducibility:
    def test_same_seed_bitwise(self, tiny, tmp_path):
        cfg, out = tiny
        assert run("train-flow", "--config", cfg, "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "flow.ckpt").read_bytes() == (out / "flow.ckpt").read_bytes()

    def test_other_seed_differs(self, tiny, tmp_path):
        cfg, out = tiny
        assert run("train-flow", "--config", cfg, "--out", tmp_path, "--seed", 4) == EXIT_OK
        assert (tmp_path / "flow.ckpt").read_bytes() != (out / "flow.ckpt").read_bytes()

    def test_rerun_from_echoed_config(self, tiny, tmp_path):
        _, out = tiny
        echo = RunConfig.load(out / "config.ini")
        assert echo.run.seed == 3 and echo.flow.size == "desk"
        for name in ("flow.ckpt", "energy.ckpt"):
            (tmp_path / name).write_bytes((out / name).read_bytes())
        assert run("sample", "--config", out / "config.ini", "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "chains_z.csv").read_bytes() == (out / "chains_z.csv").read_bytes()


class TestNce:
    def test_loss_below_chance(self, tiny, tmp_path):
        cfg, out = tiny
        text = TINY.replace("[trainer]\niterations = 15\nbatch_size = 32\n",
                            "[trainer]\niterations = 300\nbatch_size = 256\nlr = 0.01\n")
        (tmp_path / "nce.ini").write_text(text)
        (tmp_path / "flow.ckpt").write_bytes((out / "flow.ckpt").read_bytes())
        assert run("train-nce", "--config", tmp_path / "nce.ini", "--out", tmp_path) == EXIT_OK
        loss = read_table(tmp_path / "nce_trace.csv")["loss"]
        assert np.mean(loss[-30:]) < math.log(2)
        energy = load_checkpoint(tmp_path / "energy.ckpt")
        assert isinstance(energy, MLPEnergy)


class TestZeroCorrection:
    def test_samples_match_flow(self, tiny, tmp_path):
        """With f = 0 the tilted model is the flow itself."""
        cfg, out = tiny
        text = TINY.replace("[sampler]\nchains = 4\nsteps = 300\n", "[sampler]\nchains = 16\nsteps = 300\n")
        (tmp_path / "zero.ini").write_text(text)
        (tmp_path / "flow.ckpt").write_bytes((out / "flow.ckpt").read_bytes())
        save_checkpoint(tmp_path / "energy.ckpt", MLPEnergy(2, hidden=(16, 16), zero_output=True))
        assert run("sample", "--config", tmp_path / "zero.ini", "--out", tmp_path) == EXIT_OK
        chains = load_chains(tmp_path / "chains_x.csv", burn_in=50)
        mcmc = chains.post_burn_in().positions[:, ::10].reshape(-1, 2)
        flow = load_checkpoint(tmp_path / "flow.ckpt")
        _, direct = flow.sample(len(mcmc), np.random.default_rng(99))
        assert energy_distance_pvalue(mcmc, direct) > 0.01

    def test_identity_flow_nll_is_gaussian_cross_entropy(self):
        data = np.random.default_rng(0).normal(1.0, 2.0, size=(500, 2))
        flow = FlowModel(2, depth=0)
        nll = -np.mean(flow.log_prob_np(data))
        assert nll == pytest.approx(pipeline.standard_normal_cross_entropy(data), rel=1e-12)


class TestExitCodes:
    def test_no_subcommand(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert run("sample", "--frobnicate") == EXIT_USAGE
        assert "unrecognized" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[flow]\niteratons = 5\n")
        assert run("train-flow", "--config", tmp_path / "bad.ini", "--out", tmp_path) == EXIT_USAGE
        assert "unknown key flow.iteratons" in capsys.readouterr().err

    def test_missing_flow_checkpoint(self, tmp_path, capsys):
        assert run("sample", "--out", tmp_path) == EXIT_USAGE
        assert "train-flow first" in capsys.readouterr().err

    def test_bad_point(self, tiny, tmp_path, capsys):
        cfg, out = tiny
        assert run("interpolate", "--config", cfg, "--out", out, "--z1=1,2,3") == EXIT_USAGE

    def test_corrupt_chain_file(self, tmp_path, capsys):
        (tmp_path / "c.csv").write_text("chain,step\n0,1\n")
        assert run("diagnose", tmp_path / "c.csv", "--out", tmp_path) == EXIT_USAGE

    def test_numerical_failure(self, tiny, tmp_path, capsys):
        cfg, out = tiny
        flow = load_checkpoint(out / "flow.ckpt")
        for _, p in flow.named_parameters():
            p.data[...] = np.nan
        save_checkpoint(tmp_path / "flow.ckpt", flow)
        (tmp_path / "energy.ckpt").write_bytes((out / "energy.ckpt").read_bytes())
        assert run("sample", "--config", cfg, "--out", tmp_path) == EXIT_NUMERIC
        assert "numerical failure" in capsys.readouterr().err
