import numpy as np

from diffmpm.plotting import (plot_front, plot_inversion, plot_particles, plot_profile,
                              plot_series)


def _png(path):
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    return len(data)


class TestPlots:
    def test_particles(self, tmp_path, fluid_scene):
        ps = fluid_scene.initial_state().particles
        for color in ("speed", "pressure", "eps"):
            p = tmp_path / f"{color}.png"
            plot_particles(p, ps, color, fluid_scene.config.extents, title=color)
            assert _png(p) > 1000

    def test_series_and_front(self, tmp_path):
        t = np.linspace(0, 1, 20)
        plot_series(tmp_path / "s.png", t, {"a": t**2 + 1e-3, "b": t + 1e-3}, logy=True)
        plot_front(tmp_path / "f.png", t, {"flip": 1 + t}, 1 + 1.98 * t)
        plot_profile(tmp_path / "p.png", t, {"truth": t, "recovered": t * 1.1})
        for name in ("s", "f", "p"):
            _png(tmp_path / f"{name}.png")

    def test_inversion_many_parameters(self, tmp_path):
        loss = [1.0, 0.5, 0.2]
        hist = [np.full(1951, k) for k in range(3)]
        plot_inversion(tmp_path / "i.png", loss, hist)
        plot_inversion(tmp_path / "j.png", loss, [np.array([0.1 * k]) for k in range(3)], ["alpha"],
                       truth=[2.0])
        _png(tmp_path / "i.png")
        _png(tmp_path / "j.png")
