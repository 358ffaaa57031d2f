import numpy as np


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_gradient_error(target, x, h=1e-5):
    """Max componentwise error of the analytic gradient, relative to max(1, |fd|)."""
    fd = central_difference(target.log_density_unnorm, x, h)
    an = np.asarray(target.grad_log_density(x), float)
    return float(np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(fd))))



def exploding_target():
    """Factory for CLI tests: a 2-d normal whose density fails after a few calls."""
    from kickkac.targets import TargetDensity

    calls = [0]

    def log_density(x):
        calls[0] += 1
        if calls[0] > 50:
            raise FloatingPointError("density blew up")
        return -0.5 * float(np.sum(np.square(x)))

    return TargetDensity(2, log_density, lambda x: -np.asarray(x, float))


def not_a_target():
    return 42
