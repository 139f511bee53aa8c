"""Small builders shared by the tests."""
import numpy as np

from crcrisk import maskhit as mh

TINY_MODEL = mh.TransformerConfig(n_layers=1, n_heads=2, model_dim=8, mlp_dim=16, feat_dim=6,
                                  max_slots=16, region_side=4)


def random_batch(rng, cfg, n_regions=3, n_slots=None):
    """Padded region batch with random features and distinct in-window positions."""
    side = cfg.region_side
    feats, pos = [], []
    for _ in range(n_regions):
        n = n_slots or int(rng.integers(2, side * side + 1))
        cells = rng.choice(side * side, size=n, replace=False)
        pos.append(np.stack([cells // side, cells % side], axis=1))
        feats.append(rng.normal(size=(n, cfg.feat_dim)))
    return mh.RegionBatch.from_regions(feats, pos)


# acceptance verdicts, printed once per criterion in the terminal summary
VERDICTS = {}


def verdict(n, ok, detail):
    VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    return ok
