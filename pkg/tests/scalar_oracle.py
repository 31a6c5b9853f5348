"""Reference GKR forward pass and Adam recurrence in plain Python floats.

Deliberately shares no code with the package: no numpy, no imports from
``gkr``. Weights are nested lists ``W[i][j]`` mapping input i to output j.
"""

import math


def relu(x):
    return x if x > 0.0 else 0.0


def matvec(W, x):
    """x^T W for a list x and a fan_in x fan_out nested list W."""
    out = []
    for j in range(len(W[0])):
        s = 0.0
        for i in range(len(x)):
            s += x[i] * W[i][j]
        out.append(s)
    return out


def relu_layer(W, x):
    return [relu(v) for v in matvec(W, x)]


def pool(vectors, mode):
    width = len(vectors[0])
    if mode == "max":
        return [max(v[f] for v in vectors) for f in range(width)]
    return [sum(v[f] for v in vectors) / len(vectors) for f in range(width)]


def initial_nodes(fx, fy, central_init):
    peripheral = [[fx[d], fy[d]] for d in range(len(fx))]
    if central_init in ("mean", "max"):
        central = pool(peripheral, central_init)
    else:
        central = [float(central_init), float(central_init)]
    return central, peripheral


def gkr_probability(fx, fy, layers, readout, central_init=0.5, aggregator="max"):
    """``layers``: list of dicts with W_mess, W_peri, W_cen. ``readout``: list
    of weight matrices, ReLU between them, linear last."""
    central, peripheral = initial_nodes(fx, fy, central_init)
    for layer in layers:
        m_c = relu_layer(layer["W_mess"], central)
        m_p = [relu_layer(layer["W_mess"], h) for h in peripheral]
        peripheral = [relu_layer(layer["W_peri"], m + m_c) for m in m_p]
        a = pool(m_p, aggregator)
        central = relu_layer(layer["W_cen"], m_c + a)
    x = list(central)
    for h in peripheral:
        x += h
    for i, W in enumerate(readout):
        x = matvec(W, x)
        if i < len(readout) - 1:
            x = [relu(v) for v in x]
    z = x[0]
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def adam_trajectory(grads, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8, theta0=0.0):
    """Scalar Adam with bias correction, fed a fixed gradient sequence."""
    theta, m, v = theta0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def bce(z, y):
    """-(y log s(z) + (1-y) log(1-s(z))) written the textbook way."""
    s = 1.0 / (1.0 + math.exp(-z))
    return -(y * math.log(s) + (1 - y) * math.log(1.0 - s))
