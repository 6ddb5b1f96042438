import math

import numpy as np
import pytest
import scipy.integrate
from nonmarkov_sync.kernel import (
    PLACEHOLDER_CHANNEL,
    KernelChannel,
    MemoryKernel,
    envelope_integrals,
    evaluate,
    inverse_sqrt_total,
    kernel_dominates,
    moments,
)
from numpy.testing import assert_allclose


def _lorentzian(beta: float = 9.0) -> MemoryKernel:
    return MemoryKernel.single_exponential(1.0, beta)


def test_evaluate_single_exponential():
    kernel = _lorentzian()
    assert_allclose(evaluate(kernel, 0.0), [[9.0]])
    assert_allclose(evaluate(kernel, 0.5), [[9.0 * math.exp(-4.5)]])


def test_evaluate_is_diagonal_and_positive():
    kernel = MemoryKernel(
        (
            KernelChannel.exponential([(1.0, 2.0), (0.5, 7.0)]),
            KernelChannel.tabulated(0.1, [3.0, 2.0, 1.0]),
        )
    )
    value = evaluate(kernel, 0.05)
    assert value.shape == (2, 2)
    assert value[0, 1] == 0.0 and value[1, 0] == 0.0
    assert value[0, 0] == pytest.approx(2.0 * math.exp(-0.1) + 3.5 * math.exp(-0.35))
    assert value[1, 1] == pytest.approx(2.5)


def test_evaluate_rejects_negative_time_and_out_of_range():
    with pytest.raises(ValueError, match="negative"):
        evaluate(_lorentzian(), -1e-3)
    tabulated = MemoryKernel((KernelChannel.tabulated(0.1, [1.0, 0.5, 0.0]),))
    assert_allclose(evaluate(tabulated, 0.2), [[0.0]])
    with pytest.raises(ValueError, match="beyond"):
        evaluate(tabulated, 0.3)


def test_tabulated_samples_are_zero_past_the_table():
    tabulated = MemoryKernel((KernelChannel.tabulated(0.1, [1.0, 0.5, 0.0]),))
    channel = tabulated.channels[0]
    assert float(channel(0.15)) == pytest.approx(0.25)
    assert float(channel(0.3)) == 0.0
    assert float(channel(10.0)) == 0.0
    assert_allclose(tabulated.channel_values(np.array([0.0, 0.2, 50.0])), [[1.0], [0.0], [0.0]])


@pytest.mark.parametrize(
    "build",
    [
        lambda: KernelChannel.exponential([]),
        lambda: KernelChannel.exponential([(-1.0, 1.0)]),
        lambda: KernelChannel.exponential([(1.0, 0.0)]),
        lambda: KernelChannel.tabulated(0.0, [1.0, 0.0]),
        lambda: KernelChannel.tabulated(0.1, [1.0]),
        lambda: KernelChannel.tabulated(0.1, [0.0, 1.0]),
        lambda: KernelChannel.tabulated(0.1, [1.0, -0.5]),
        lambda: KernelChannel(form="gaussian"),
    ],
)
def test_channel_validation(build):
    with pytest.raises(ValueError):
        build()


def test_memory_kernel_needs_channels():
    with pytest.raises(ValueError):
        MemoryKernel(())


def test_moments_of_lorentzian_are_closed_form():
    mom = moments(_lorentzian())
    assert_allclose(mom.total, [[1.0]], atol=1e-15)
    assert mom.norm_mass == pytest.approx(1.0, abs=1e-12)
    assert mom.mean_delay == pytest.approx(1.0 / 9.0, abs=1e-12)


def test_moments_of_exponential_sum():
    kernel = MemoryKernel((KernelChannel.exponential([(0.25, 2.0), (0.75, 6.0)]),))
    mom = moments(kernel)
    assert mom.norm_mass == pytest.approx(1.0)
    assert mom.mean_delay == pytest.approx(0.25 / 2.0 + 0.75 / 6.0, abs=1e-12)


def test_envelope_follows_crossover_between_channels():
    slow = KernelChannel.exponential([(1.0, 1.0)])
    fast = KernelChannel.exponential([(1.0, 4.0)])
    mass, first = envelope_integrals([slow, fast])

    t_cross = math.log(4.0) / 3.0
    expected_mass = (1.0 - math.exp(-4.0 * t_cross)) + math.exp(-t_cross)
    expected_first = (
        0.25
        - (t_cross + 0.25) * math.exp(-4.0 * t_cross)
        + (t_cross + 1.0) * math.exp(-t_cross)
    )
    assert mass == pytest.approx(expected_mass, abs=1e-12)
    assert first == pytest.approx(expected_first, abs=1e-12)

    def envelope(t: float) -> float:
        return max(math.exp(-t), 4.0 * math.exp(-4.0 * t))

    quad_mass, _ = scipy.integrate.quad(envelope, 0.0, np.inf, limit=200)
    assert mass == pytest.approx(quad_mass, abs=1e-6)


def test_moments_top_block_ignores_later_channels():
    kernel = MemoryKernel(
        (KernelChannel.exponential([(2.0, 9.0)]), KernelChannel.exponential([(1.0, 0.1)]))
    )
    mom = moments(kernel, top_n=1)
    assert_allclose(np.diag(mom.total), [2.0])
    assert mom.mean_delay == pytest.approx(1.0 / 9.0)
    with pytest.raises(ValueError):
        moments(kernel, top_n=3)


def test_tabulated_moments_use_trapezoid():
    dt = 1e-3
    times = dt * np.arange(5001)
    channel = KernelChannel.tabulated(dt, 9.0 * np.exp(-9.0 * times))
    mom = moments(MemoryKernel((channel,)))
    assert mom.norm_mass == pytest.approx(1.0, abs=1e-5)
    assert mom.mean_delay == pytest.approx(1.0 / 9.0, abs=1e-5)
    assert mom.total[0, 0] == pytest.approx(channel.total())


def test_tabulated_moments_reject_undecayed_tail():
    kernel = MemoryKernel((KernelChannel.tabulated(1.0, [1.0, 1.0, 1.0]),))
    with pytest.raises(ValueError, match="decayed"):
        moments(kernel)


def test_inverse_sqrt_total():
    kernel = MemoryKernel(
        (KernelChannel.exponential([(4.0, 1.0)]), KernelChannel.exponential([(0.25, 3.0)]))
    )
    assert_allclose(inverse_sqrt_total(kernel), np.diag([0.5, 2.0]))


def test_inverse_sqrt_total_rejects_vanishing_channel():
    kernel = MemoryKernel((KernelChannel.tabulated(1.0, [1e-13, 0.0, 0.0]),))
    with pytest.raises(ValueError, match="near"):
        inverse_sqrt_total(kernel)


def test_kernel_dominates_compares_totals_and_mean_delay():
    reference = _lorentzian(9.0)
    faster = _lorentzian(18.0)
    assert kernel_dominates(faster, reference, 1)
    assert not kernel_dominates(reference, faster, 1)
    heavier = MemoryKernel.single_exponential(2.0, 18.0)
    assert not kernel_dominates(heavier, reference, 1)


def test_padded_appends_placeholder_channels():
    padded = _lorentzian().padded(3)
    assert padded.m == 3
    assert padded.channels[1:] == (PLACEHOLDER_CHANNEL, PLACEHOLDER_CHANNEL)
    assert PLACEHOLDER_CHANNEL.total() == 1.0
    with pytest.raises(ValueError):
        padded.padded(2)


def test_scaled_kernel_rescales_totals():
    kernel = MemoryKernel(
        (KernelChannel.exponential([(1.0, 2.0)]), KernelChannel.tabulated(0.5, [2.0, 0.0]))
    )
    assert_allclose(kernel.scaled([2.0, 3.0]).totals(), [2.0, 1.5])
    assert_allclose(kernel.scaled(0.5).totals(), [0.5, 0.25])


def test_exponential_terms_and_isclose():
    kernel = MemoryKernel((KernelChannel.exponential([(0.5, 2.0), (0.5, 3.0)]),))
    assert kernel.exponential_terms() == [[(0.5, 2.0), (0.5, 3.0)]]
    swapped = MemoryKernel((KernelChannel.exponential([(0.5, 3.0), (0.5, 2.0)]),))
    assert kernel.isclose(swapped)
    assert not kernel.isclose(_lorentzian())
    with pytest.raises(ValueError):
        KernelChannel.tabulated(0.1, [1.0, 0.0]).exponential_terms()


def _random_exponential_kernel(rng: np.random.Generator, m: int) -> MemoryKernel:
    channels = []
    for _ in range(m):
        k = int(rng.integers(1, 4))
        terms = zip(rng.uniform(0.1, 2.0, k), rng.uniform(0.5, 12.0, k), strict=True)
        channels.append(KernelChannel.exponential(terms))
    return MemoryKernel(tuple(channels))


def test_uniform_scaling_moves_mass_but_not_mean_delay(rng: np.random.Generator):
    for _ in range(10):
        kernel = _random_exponential_kernel(rng, int(rng.integers(1, 4)))
        scale = float(rng.uniform(0.2, 5.0))
        base, scaled = moments(kernel), moments(kernel.scaled(scale))
        assert scaled.norm_mass == pytest.approx(scale * base.norm_mass, rel=1e-9)
        assert scaled.mean_delay == pytest.approx(base.mean_delay, rel=1e-9)
        assert_allclose(scaled.total, scale * base.total, rtol=1e-12)


def test_closed_form_moments_match_sampled_envelope(rng: np.random.Generator):
    for _ in range(10):
        kernel = _random_exponential_kernel(rng, int(rng.integers(1, 4)))
        beta_min = min(ch.slowest_rate for ch in kernel.channels)
        times = np.linspace(0.0, 40.0 / beta_min, 400_001)
        envelope = np.max(kernel.channel_values(times), axis=-1)
        mass = scipy.integrate.trapezoid(envelope, times)
        first = scipy.integrate.trapezoid(times * envelope, times)
        mom = moments(kernel)
        assert mom.norm_mass == pytest.approx(mass, rel=1e-5)
        assert mom.mean_delay == pytest.approx(first / mass, rel=1e-5)
