"""Independent parameter count for the default and small topologies.

Walks the layer shapes by hand and counts trainable elements (conv weights and
biases, BN gamma and beta, FC weights and biases). BN running statistics are
buffers and are not counted.
"""


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def pool_out(n, k, s):
    return (n - k) // s + 1


def count(in_ch, size, channels, kernels, strides, pads, pool_after, avg_k, branches, head_out=2):
    total = 0
    c, n = in_ch, size
    for i, (oc, k, s, p) in enumerate(zip(channels, kernels, strides, pads), start=1):
        total += oc * c * k * k + oc  # conv
        total += 2 * oc  # bn
        n = conv_out(n, k, s, p)
        if i in pool_after:
            n = pool_out(n, 3, 2)
        c = oc
    n = pool_out(n, avg_k, avg_k)
    feat = c * n * n
    fused = 0
    for widths in branches:
        prev = feat
        for w in widths:
            total += w * prev + w
            prev = w
        fused += widths[-1]
    total += head_out * fused + head_out
    return feat, total


if __name__ == "__main__":
    print("default", count(1, 224, [64, 192, 384, 256, 256], [11, 3, 3, 3, 3], [4, 1, 1, 1, 1],
                           [2, 1, 1, 1, 1], {1, 2, 5}, 6,
                           [[2048, 1024, 2], [1024, 512, 2], [256, 128, 2]]))
    print("small", count(1, 64, [16, 24, 32, 32, 32], [11, 3, 3, 3, 3], [2, 1, 1, 1, 1],
                         [2, 1, 1, 1, 1], {1, 2, 5}, 2,
                         [[128, 64, 2], [64, 32, 2], [32, 16, 2]]))
