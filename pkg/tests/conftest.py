import numpy as np
import pytest

from geowarp.core import ModelConfig, ParameterChart, SiteDataset, Sounding, Variant


def make_site(n_soundings=4, n_depths=25, seed=0, dim=2, h_max=10.0, extent=100.0,
              values=None):
    """Small synthetic geometry for unit tests (values default to smooth noise)."""
    rng = np.random.default_rng(seed)
    soundings = []
    depths = np.linspace(h_max / n_depths, h_max, n_depths)
    for i in range(n_soundings):
        loc = rng.uniform(0, extent, size=dim)
        if values is None:
            v = np.cumsum(rng.normal(scale=0.1, size=n_depths)) + 0.05 * depths
        else:
            v = values[i]
        soundings.append(Sounding(f"cpt{i:02d}", loc, depths, v))
    return SiteDataset(tuple(soundings), h_max=h_max, dim=dim)


def small_config(variant=Variant.FULL, vertical_order=4, delta_mu=1.0, delta_sigma=5.0):
    return ModelConfig(
        delta_mu=delta_mu,
        delta_sigma=delta_sigma,
        awu_orders=(2, 2, vertical_order),
        variant=variant,
    )


def random_theta(cfg, k_zeta, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    chart = ParameterChart(cfg, k_zeta)
    return chart.decode(rng.normal(scale=scale, size=chart.dim))


@pytest.fixture
def tiny_site():
    return make_site(n_soundings=4, n_depths=20, seed=1)
