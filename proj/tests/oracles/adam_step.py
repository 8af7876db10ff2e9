"""Hand-rolled Adam with coupled weight decay, one step on a scalar."""

theta, g = 1.0, 1.0
alpha, lam = 1e-5, 0.01
b1, b2, eps = 0.9, 0.999, 1e-8

g = g + lam * theta
m = (1 - b1) * g
v = (1 - b2) * g * g
m_hat = m / (1 - b1 ** 1)
v_hat = v / (1 - b2 ** 1)
theta = theta - alpha * m_hat / (v_hat ** 0.5 + eps)
print(repr(theta), theta.hex())
