import numpy as np
import pytest

from debal.data import InteractionTable
from debal.estimators import REQUIRED_MODELS, Batch
from debal.factor import init_model


def randomize(model, rng, scale=0.5):
    model.set_flat(rng.normal(0.0, scale, model.num_params))
    return model


def tiny_instance(family="autodebias", delta="cross-entropy", seed=0, M=3, N=3, d=2):
    """Random M x N world with every model of ``family`` and a full batch."""
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(M * N, size=max(2, (M * N) // 2), replace=False))
    users, items = np.divmod(flat, N)
    binary = delta == "cross-entropy"
    ratings = rng.integers(0, 2, len(flat)).astype(float) if binary else rng.normal(0.0, 1.0, len(flat))
    biased = InteractionTable(M, N, users, items, ratings, scale=(0, 1) if binary else None)
    uflat = np.sort(rng.choice(M * N, size=4, replace=False))
    uu, ui = np.divmod(uflat, N)
    uratings = rng.integers(0, 2, 4).astype(float) if binary else rng.normal(0.0, 1.0, 4)
    uniform = InteractionTable(M, N, uu, ui, uratings, role="uniform-balance", scale=(0, 1) if binary else None)

    label_link = "sigmoid" if binary else "identity"
    theta = randomize(init_model(M, N, d, label_link, seed=rng.integers(1 << 31)), rng)
    phi = {}
    for name in REQUIRED_MODELS.get(family, ()):
        if name == "e":
            phi[name] = randomize(init_model(M, N, d, label_link, seed=rng.integers(1 << 31)), rng)
        else:
            # well inside (floor, 1) so the clip never binds under perturbation
            phi[name] = randomize(init_model(M, N, d, "sigmoid", seed=rng.integers(1 << 31), clip_floor=0.05), rng, 0.3)
    return biased, uniform, Batch.full(biased), theta, phi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_rating_world(root, seed=0, users=30, items=40, confound=0.5, uniform_size=600, **synthetic):
    """Synthetic 1-5 star biased/uniform matrices in Coat layout plus a run config.

    Returns the config path; ``[train]`` keeps runs to a few seconds.
    """
    from debal.data import SyntheticConfig, generate_confounded

    cfg = SyntheticConfig(
        num_users=users, num_items=items, confound_strength=confound, uniform_size=uniform_size, **synthetic
    )
    _, biased, uniform = generate_confounded(cfg, seed=seed)
    for name, table in (("train.ascii", biased), ("test.ascii", uniform)):
        mat = np.zeros((users, items), dtype=int)
        mat[table.users, table.items] = np.clip(np.rint(2.0 * table.ratings + 3.0), 1, 5).astype(int)
        np.savetxt(root / name, mat, fmt="%d")
    config = root / "run.ini"
    config.write_text(
        "[data]\n"
        f"biased = {root / 'train.ascii'}\n"
        f"uniform = {root / 'test.ascii'}\n"
        "format = coat-matrix\n"
        "fractions = 0.3, 0.2, 0.5\n"
        "threshold = 4\n"
        "[run]\n"
        "method = bal-dr\n"
        "seeds = 0\n"
        f"output_dir = {root / 'runs'}\n"
        "[train]\n"
        "outer_iters = 3\ninner_steps = 4\nd = 3\nlr = 0.5\nlr_xi = 0.5\n"
        "batch_b = 64\nbatch_d = 128\nbatch_u = 32\nlambda = 0.25\n"
    )
    return config
