"""Implicit field regression: positional encoding, the SDF network and its
exact spatial gradient, attention-based view fusion, and radiance decoding.

The SDF gradient is propagated alongside the forward pass as a 3-column
tangent (one per spatial axis) built from ordinary graph operations, so the
returned normal is exact and training gradients flow through it (as the
Eikonal term requires). The SDF path uses softplus(beta=100) activations so
this tangent is smooth everywhere.
"""

from dataclasses import dataclass, field as dfield

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class FieldError(Exception):
    pass


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def pe_dim(d, L):
    return d * (1 + 2 * L)


def positional_encode(v, L):
    """gamma(v): raw v followed by (sin, cos) pairs at frequencies 2^l pi.

    Works on Tensors (graph ops) and numpy arrays alike; L=0 is passthrough.
    """
    if L < 0:
        raise FieldError("L must be >= 0")
    if isinstance(v, Tensor):
        parts = [v]
        for l in range(L):
            w = (2.0 ** l) * np.pi
            parts.append(ad.tsin(v * w))
            parts.append(ad.tcos(v * w))
        return ad.concat(parts, axis=-1) if len(parts) > 1 else v
    v = np.asarray(v, dtype=np.float64)
    parts = [v]
    for l in range(L):
        w = (2.0 ** l) * np.pi
        parts.append(np.sin(w * v))
        parts.append(np.cos(w * v))
    return np.concatenate(parts, axis=-1) if len(parts) > 1 else v


def positional_encode_jvp(x, L):
    """gamma(x) and d(gamma)/dx for fixed numpy points x (P,3).

    Returns (enc (P,D), jac (P,3,D)) with D = 3*(1+2L); the jacobian is block
    sparse (each encoded channel depends on one input axis).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    p = len(x)
    D = pe_dim(3, L)
    enc = np.empty((p, D))
    jac = np.zeros((p, 3, D))
    enc[:, :3] = x
    for a in range(3):
        jac[:, a, a] = 1.0
    col = 3
    for l in range(L):
        w = (2.0 ** l) * np.pi
        s, c = np.sin(w * x), np.cos(w * x)
        enc[:, col:col + 3] = s
        enc[:, col + 3:col + 6] = c
        for a in range(3):
            jac[:, a, col + a] = w * c[:, a]
            jac[:, a, col + 3 + a] = -w * s[:, a]
        col += 6
    return enc, jac


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

@dataclass
class FieldConfig:
    pe_x: int = 6              # positional-encoding order for positions
    pe_d: int = 4              # ... for view directions and raw pixels
    sdf_hidden: int = 128
    sdf_layers: int = 4
    surface_feature_dim: int = 64
    decoder_hidden: int = 128
    decoder_layers: int = 3
    fusion_width: int = 64
    fusion_heads: int = 4
    fusion_blocks: int = 1
    fusion_ffn: int = 128
    softplus_beta: float = 100.0


# ---------------------------------------------------------------------------
# SDF network
# ---------------------------------------------------------------------------

class SDFNetwork:
    """MLP regressing (signed distance, surface feature) from encoded
    position and the two trilinear volume features.

    Geometric initialization: at step 0 the field approximates
    ``|x - center| - r0``, so the renderer has a crossable level set.
    """

    def __init__(self, store, cfg, feat_dims, center, r0, rng, prefix="sdf"):
        self.cfg = cfg
        self.center = np.asarray(center, dtype=np.float64)
        self.r0 = float(r0)
        c_c, c_d = feat_dims
        self.in_dim = pe_dim(3, cfg.pe_x) + c_c + c_d
        h = cfg.sdf_hidden
        out_dim = 1 + cfg.surface_feature_dim
        dims = [self.in_dim] + [h] * cfg.sdf_layers + [out_dim]
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            wname = "%s/w%d" % (prefix, i)
            if wname in store:
                self.weights.append(store[wname])
                self.biases.append(store["%s/b%d" % (prefix, i)])
                continue
            fan_in, fan_out = dims[i], dims[i + 1]
            if i == 0:
                w = np.zeros((fan_in, fan_out))
                w[:3, :] = rng.normal(0, np.sqrt(2.0) / np.sqrt(fan_out),
                                      size=(3, fan_out))
                b = np.zeros(fan_out)
            elif i == len(dims) - 2:
                w = rng.normal(0, 1e-4, size=(fan_in, fan_out))
                w[:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4,
                                     size=fan_in)
                b = np.zeros(fan_out)
                b[0] = -self.r0
            else:
                w = rng.normal(0, np.sqrt(2.0) / np.sqrt(fan_out),
                               size=(fan_in, fan_out))
                b = np.zeros(fan_out)
            self.weights.append(store.add(wname, w))
            self.biases.append(store.add("%s/b%d" % (prefix, i), b))

    def _act(self, z):
        return ad.softplus(z, beta=self.cfg.softplus_beta)

    def forward(self, x, f_c, f_d):
        """x: (P,3) numpy; f_c/f_d: (P,*) Tensors. Returns (s (P,1), f_s)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        enc = positional_encode(x - self.center, self.cfg.pe_x)
        u = ad.concat([Tensor(enc), f_c, f_d], axis=-1)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = ad.matmul(u, w) + b
            if i + 1 < len(self.weights):
                u = self._act(u)
        return u[:, 0:1], u[:, 1:]

    def forward_with_gradient(self, x, f_c, f_d, df_c, df_d):
        """Forward pass carrying the 3-column spatial tangent.

        df_c/df_d are (P,3,C) Tensors (trilinear spatial derivatives).
        Returns (s (P,1), f_s, g (P,3)) with g = ds/dx exactly.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        enc, jac = positional_encode_jvp(x - self.center, self.cfg.pe_x)
        u = ad.concat([Tensor(enc), f_c, f_d], axis=-1)
        du = ad.concat([Tensor(jac), df_c, df_d], axis=-1)   # (P,3,in)
        beta = self.cfg.softplus_beta
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = ad.matmul(u, w) + b
            dz = ad.matmul(du, w)
            if i + 1 < len(self.weights):
                u = self._act(z)
                gate = ad.sigmoid(z * beta)                  # softplus'
                du = dz * ad.reshape(gate, (gate.shape[0], 1, gate.shape[1]))
            else:
                u, du = z, dz
        s = u[:, 0:1]
        f_s = u[:, 1:]
        g = ad.reshape(du[:, :, 0:1], (u.shape[0], 3))
        return s, f_s, g

    def forward_np(self, x, f_c, f_d):
        """Detached numpy evaluation of s only (importance sampling path)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        enc = positional_encode(x - self.center, self.cfg.pe_x)
        u = np.concatenate([enc, f_c, f_d], axis=-1)
        beta = self.cfg.softplus_beta
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = u @ w.data + b.data
            if i + 1 < len(self.weights):
                u = (np.maximum(beta * u, 0.0)
                     + np.log1p(np.exp(-np.abs(beta * u)))) / beta
        return u[:, 0]


# ---------------------------------------------------------------------------
# Transformer view fusion
# ---------------------------------------------------------------------------

def _layer_norm(x, gamma, beta, eps=1e-8):
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.tmean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.tsqrt(var + eps) * gamma + beta


class ViewFusion:
    """Stacked self-attention over per-view tokens, mean-pooled to one fused
    appearance feature. Permutation-invariant by construction (no per-view
    positional embedding)."""

    def __init__(self, store, cfg, token_dim, rng, prefix="fusion"):
        self.cfg = cfg
        self.token_dim = token_dim
        w = cfg.fusion_width
        self.params = {}

        def mk(name, shape, std):
            full = "%s/%s" % (prefix, name)
            if full in store:
                self.params[name] = store[full]
            else:
                if std == 0.0:
                    init = np.zeros(shape) if len(shape) > 1 else None
                    if init is None:
                        init = np.zeros(shape)
                else:
                    init = rng.normal(0, std, size=shape)
                self.params[name] = store.add(full, init)

        mk("proj/w", (token_dim, w), np.sqrt(1.0 / token_dim))
        mk("proj/b", (w,), 0.0)
        for blk in range(cfg.fusion_blocks):
            p = "blk%d" % blk
            for nm in ("q", "k", "v", "o"):
                mk("%s/%s_w" % (p, nm), (w, w), np.sqrt(1.0 / w))
                mk("%s/%s_b" % (p, nm), (w,), 0.0)
            mk("%s/ffn1_w" % p, (w, cfg.fusion_ffn), np.sqrt(2.0 / w))
            mk("%s/ffn1_b" % p, (cfg.fusion_ffn,), 0.0)
            mk("%s/ffn2_w" % p, (cfg.fusion_ffn, w), np.sqrt(1.0 / cfg.fusion_ffn))
            mk("%s/ffn2_b" % p, (w,), 0.0)
            for ln in ("ln1", "ln2"):
                full_g = "%s/%s/%s_g" % (prefix, p, ln)
                if full_g in store:
                    self.params["%s/%s_g" % (p, ln)] = store[full_g]
                    self.params["%s/%s_b" % (p, ln)] = store[
                        "%s/%s/%s_b" % (prefix, p, ln)]
                else:
                    self.params["%s/%s_g" % (p, ln)] = store.add(full_g,
                                                                 np.ones(w))
                    self.params["%s/%s_b" % (p, ln)] = store.add(
                        "%s/%s/%s_b" % (prefix, p, ln), np.zeros(w))

    def __call__(self, tokens):
        """tokens: (P, Nv, token_dim) Tensor -> fused (P, width) Tensor."""
        if tokens.shape[1] < 1:
            raise FieldError("need at least one view token")
        cfg = self.cfg
        w = cfg.fusion_width
        nh = cfg.fusion_heads
        hd = w // nh
        pr = self.params
        x = ad.matmul(tokens, pr["proj/w"]) + pr["proj/b"]   # (P,Nv,w)
        p_count, nv = x.shape[0], x.shape[1]
        for blk in range(cfg.fusion_blocks):
            pfx = "blk%d" % blk

            def heads(t):
                t = ad.reshape(t, (p_count, nv, nh, hd))
                return ad.swapaxes(t, 1, 2)                  # (P,nh,Nv,hd)

            q = heads(ad.matmul(x, pr[pfx + "/q_w"]) + pr[pfx + "/q_b"])
            k = heads(ad.matmul(x, pr[pfx + "/k_w"]) + pr[pfx + "/k_b"])
            v = heads(ad.matmul(x, pr[pfx + "/v_w"]) + pr[pfx + "/v_b"])
            scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
            attn = ad.softmax(scores, axis=-1)
            mixed = ad.matmul(attn, v)                       # (P,nh,Nv,hd)
            mixed = ad.reshape(ad.swapaxes(mixed, 1, 2), (p_count, nv, w))
            o = ad.matmul(mixed, pr[pfx + "/o_w"]) + pr[pfx + "/o_b"]
            x = _layer_norm(x + o, pr[pfx + "/ln1_g"], pr[pfx + "/ln1_b"])
            h = ad.relu(ad.matmul(x, pr[pfx + "/ffn1_w"]) + pr[pfx + "/ffn1_b"])
            f = ad.matmul(h, pr[pfx + "/ffn2_w"]) + pr[pfx + "/ffn2_b"]
            x = _layer_norm(x + f, pr[pfx + "/ln2_g"], pr[pfx + "/ln2_b"])
        return ad.tmean(x, axis=1)                           # (P,w)


def fuse_views(fusion, image_features, encoded_pixels):
    """Build tokens concat(f_xi, gamma(p_xi)) and fuse them.

    image_features: (P,Nv,c) Tensor; encoded_pixels: (P,Nv,pe) numpy/Tensor.
    """
    if not isinstance(encoded_pixels, Tensor):
        encoded_pixels = Tensor(encoded_pixels)
    tokens = ad.concat([image_features, encoded_pixels], axis=-1)
    return fusion(tokens)


# ---------------------------------------------------------------------------
# Radiance decoder
# ---------------------------------------------------------------------------

class RadianceDecoder:
    """Perceptron decoding RGB from surface feature, raw SDF gradient,
    encoded position/direction, and the fused appearance feature."""

    def __init__(self, store, cfg, rng, prefix="decoder"):
        self.cfg = cfg
        self.in_dim = (cfg.surface_feature_dim + 3 + pe_dim(3, cfg.pe_x)
                       + pe_dim(3, cfg.pe_d) + cfg.fusion_width)
        dims = [self.in_dim] + [cfg.decoder_hidden] * cfg.decoder_layers + [3]
        self.weights = []
        self.biases = []
        for i in range(len(dims) - 1):
            wname = "%s/w%d" % (prefix, i)
            if wname in store:
                self.weights.append(store[wname])
                self.biases.append(store["%s/b%d" % (prefix, i)])
                continue
            w = rng.normal(0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
            self.weights.append(store.add(wname, w))
            self.biases.append(store.add("%s/b%d" % (prefix, i), np.zeros(dims[i + 1])))

    def __call__(self, f_s, g, x, d, fused):
        """Returns RGB in (0,1): sigmoid-terminated decoder."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
        enc_x = Tensor(positional_encode(x, self.cfg.pe_x))
        enc_d = Tensor(positional_encode(d, self.cfg.pe_d))
        u = ad.concat([f_s, g, enc_x, enc_d, fused], axis=-1)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = ad.matmul(u, w) + b
            if i + 1 < len(self.weights):
                u = ad.relu(u)
        return ad.sigmoid(u)
