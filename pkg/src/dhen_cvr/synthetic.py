"""Seeded synthetic ads world with planted crossing, sequence and click effects.

All randomness comes from Philox counter-based streams keyed by
(world seed, stream tag, day), so a partition is a pure function of the
config and its day index regardless of generation order.

Label model for an impression of ad j shown to user i::

    s_uv   = <u_i, v_j> / sqrt(E)
    s_seq  = <m_i / |m_i|, v_j>      m_i: mean of the user's last conversions' ad embeddings
    click  ~ Bernoulli(sigmoid(a * s_uv + c0 + eps))
    conv_h ~ Bernoulli(sigmoid(b0_h + b1 * s_uv + b2 * f1_i * f2_j + b3 * s_seq + kappa * click + eps_h))

c0 and each b0_h are set by bisection on the day's impressions to hit the
configured rates.  Impressions without any conversion are kept with
probability ``downsample_rate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import CONVERSION_HEADS, SEQUENCE_KINDS, WorldConfig
from .data import ACTION_IDS, Partition, SequenceColumn, _ragged_index
from .features import N_GENDERS, N_INTERESTS, N_LOCATIONS

DAY_SECONDS = 86400.0
_STREAMS = {"world": 1, "background": 2, "impressions": 3, "labels": 4, "downsample": 5, "masks": 6}
_KIND_TAG = {k: i + 1 for i, k in enumerate(SEQUENCE_KINDS)}
_ENGAGE_ACTIONS = np.array([ACTION_IDS[a] for a in ("click", "long_click", "save", "hide")])
_ENGAGE_P = np.array([0.5, 0.2, 0.2, 0.1])
_CONV_ACTIONS = {"checkout": "checkout", "add_to_cart": "add_to_cart", "signup": "signup", "lead": "attribute"}
_BACKGROUND_CONV = np.array([ACTION_IDS[a] for a in ("checkout", "add_to_cart", "signup", "attribute")])
_RECENT_DAYS = 7


def philox(seed: int, stream: str, day: int = 0, sub: int = 0) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF,
           ((_STREAMS[stream] & 0xFFFF) << 48) | ((sub & 0xFFFF) << 32) | ((day + (1 << 31)) & 0xFFFFFFFF)]
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class World:
    """Latent users, ads and content pools; ids are 1-based in emitted data (0 is out-of-vocabulary)."""

    cfg: WorldConfig
    user_latent: np.ndarray
    user_taste: np.ndarray
    ad_latent: np.ndarray
    ad_advertiser: np.ndarray
    advertiser_emb: np.ndarray
    item_emb: np.ndarray
    query_emb: np.ndarray
    ad_pretrained: np.ndarray
    user_pretrained: np.ndarray
    user_f1: np.ndarray
    ad_f2: np.ndarray
    user_age: np.ndarray
    user_gender: np.ndarray
    user_location: np.ndarray
    user_interest: np.ndarray

    def kind_table(self, kind: str) -> np.ndarray:
        """Item embedding table (0-based rows) of a sequence kind."""
        return {"search": self.query_emb, "org": self.item_emb, "ads": self.ad_pretrained,
                "match": self.advertiser_emb, "conv": self.ad_pretrained}[kind]

    def kind_driver(self, kind: str) -> np.ndarray:
        return self.user_taste if kind in ("match", "conv") else self.user_latent


def generate_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = philox(cfg.seed, "world")
    e = cfg.emb_dim
    u = rng.standard_normal((cfg.n_users, e))
    z = rng.standard_normal((cfg.n_users, e))
    rho = cfg.conv_taste_corr
    taste = rho * u + math.sqrt(1.0 - rho * rho) * z
    v = rng.standard_normal((cfg.n_ads, e))
    adv = np.concatenate([np.arange(cfg.n_advertisers),
                          rng.integers(0, cfg.n_advertisers, cfg.n_ads - cfg.n_advertisers)])
    adv = rng.permutation(adv)
    adv_emb = np.zeros((cfg.n_advertisers, e))
    np.add.at(adv_emb, adv, v)
    adv_emb /= np.bincount(adv, minlength=cfg.n_advertisers)[:, None]
    items = rng.standard_normal((cfg.n_items, e))
    queries = rng.standard_normal((cfg.n_queries, e))
    ad_pre = v + cfg.pretrained_noise * rng.standard_normal((cfg.n_ads, e))
    user_pre = u + cfg.pretrained_noise * rng.standard_normal((cfg.n_users, e))
    f1 = rng.standard_normal(cfg.n_users)
    f2 = rng.standard_normal(cfg.n_ads)
    age = rng.integers(18, 71, cfg.n_users).astype(np.float64)
    gender = rng.integers(1, N_GENDERS + 1, cfg.n_users)
    location = rng.integers(1, N_LOCATIONS + 1, cfg.n_users)
    centroids = rng.standard_normal((N_INTERESTS, e))
    interest = np.argmax(u @ centroids.T, axis=1) + 1

    def r4(x):
        return np.round(x, 4)

    return World(cfg, u, taste, v, adv + 1, r4(adv_emb), r4(items), r4(queries), r4(ad_pre), r4(user_pre),
                 r4(f1), r4(f2), age, gender.astype(np.int64), location.astype(np.int64),
                 interest.astype(np.int64))


@dataclass
class _History:
    """All events of one kind, sorted by (user, time)."""

    users: np.ndarray
    items: np.ndarray
    actions: np.ndarray
    ts: np.ndarray
    advertisers: np.ndarray

    @classmethod
    def empty(cls) -> "_History":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0), z.copy())

    def extend(self, other: "_History") -> "_History":
        """Merge events; a stable (user, time) sort keeps insertion order on ties."""
        cat = [np.concatenate([getattr(self, f), getattr(other, f)])
               for f in ("users", "items", "actions", "ts", "advertisers")]
        order = np.lexsort((cat[3], cat[0]))
        return _History(*(c[order] for c in cat))


def _sample_rows(cdf: np.ndarray, rows: np.ndarray, r: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(rows), dtype=np.int64)
    for s in range(0, len(rows), chunk):
        sl = slice(s, s + chunk)
        out[sl] = (cdf[rows[sl]] < r[sl, None]).sum(axis=1)
    return np.minimum(out, cdf.shape[1] - 1)


def _bisect_offset(base: np.ndarray, target: float) -> float:
    """Offset b with mean(sigmoid(base + b)) == target."""
    lo, hi = -40.0, 40.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(_sigmoid(base + mid)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Simulator:
    """Grows behavior histories day by day and emits impression partitions.

    Partitions are cached; requesting day d simulates every earlier day once.
    """

    def __init__(self, world: World):
        self.world = world
        self.cfg = world.cfg
        self.hist = {k: _History.empty() for k in SEQUENCE_KINDS}
        self.day = -self.cfg.history_days
        self.cache: dict[int, Partition] = {}
        self._cdf = {}
        e = self.cfg.emb_dim
        for k in SEQUENCE_KINDS:
            logits = self.cfg.affinity_temperature * (world.kind_driver(k) @ world.kind_table(k).T) / math.sqrt(e)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            self._cdf[k] = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)

    # -- background behavior

    def _background(self, day: int) -> dict[str, _History]:
        cfg = self.cfg
        out = {}
        for k in SEQUENCE_KINDS:
            rng = philox(cfg.seed, "background", day, _KIND_TAG[k])
            counts = rng.poisson(cfg.seq_rates.get(k, 0.0), cfg.n_users)
            users = np.repeat(np.arange(cfg.n_users), counts)
            n = len(users)
            items = _sample_rows(self._cdf[k], users, rng.random(n))
            ts = np.floor(day * DAY_SECONDS + rng.random(n) * DAY_SECONDS)
            if k == "search":
                actions = np.full(n, ACTION_IDS["search_issue"])
            elif k in ("org", "ads"):
                actions = _ENGAGE_ACTIONS[rng.choice(4, size=n, p=_ENGAGE_P)]
            elif k == "match":
                actions = np.full(n, ACTION_IDS["match"])
            else:
                actions = _BACKGROUND_CONV[rng.integers(0, 4, n)]
            if k == "match":
                adv = items + 1
            elif k == "conv":
                adv = self.world.ad_advertiser[items]
            else:
                adv = np.zeros(n, dtype=np.int64)
            order = np.lexsort((ts, users))
            out[k] = _History(users[order], (items + 1)[order], actions[order].astype(np.int64), ts[order],
                              adv[order].astype(np.int64))
        return out

    def _advance(self, extra: dict[str, _History] | None = None) -> None:
        bg = self._background(self.day)
        for k in SEQUENCE_KINDS:
            add = bg[k] if extra is None or k not in extra else bg[k].extend(extra[k])
            self.hist[k] = self.hist[k].extend(add)
        self.day += 1

    # -- impressions

    def _recent_conv_direction(self, users: np.ndarray) -> np.ndarray:
        """Unit-norm mean ad embedding of each user's most recent conversions (zeros if none)."""
        h = self.hist["conv"]
        e = self.cfg.emb_dim
        out = np.zeros((len(users), e))
        starts = np.searchsorted(h.users, users, side="left")
        ends = np.searchsorted(h.users, users, side="right")
        w = self.cfg.recent_window
        lengths = np.minimum(ends - starts, w)
        flat = _ragged_index(ends - lengths, lengths)
        if flat.size:
            emb = self.world.ad_pretrained[h.items[flat] - 1]
            seg = np.repeat(np.arange(len(users)), lengths)
            np.add.at(out, seg, emb)
            out /= np.maximum(lengths, 1)[:, None]
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return np.where(norm > 0, out / np.where(norm > 0, norm, 1.0), 0.0)

    def _sequences(self, users: np.ndarray, day: int) -> tuple[dict[str, SequenceColumn], dict[str, np.ndarray]]:
        """Per-example sequence columns (sharing one segment per distinct user) and count features."""
        cfg = self.cfg
        uniq, inv = np.unique(users, return_inverse=True)
        cols, counts = {}, {}
        for k in SEQUENCE_KINDS:
            h = self.hist[k]
            s = np.searchsorted(h.users, uniq, side="left")
            t = np.searchsorted(h.users, uniq, side="right")
            n_all = t - s
            lengths = np.minimum(n_all, cfg.max_seq_len)
            flat = _ragged_index(t - lengths, lengths)
            seg_starts = np.zeros(len(uniq), dtype=np.int64)
            if len(uniq):
                seg_starts[1:] = np.cumsum(lengths)[:-1]
            table = self.world.kind_table(k)
            items = h.items[flat]
            cols[k] = SequenceColumn(items, h.actions[flat], h.ts[flat],
                                     table[items - 1] if items.size else np.zeros((0, cfg.emb_dim)),
                                     h.advertisers[flat], seg_starts[inv], lengths[inv])
            counts[f"cnt_{k}"] = np.log1p(n_all[inv].astype(np.float64))
            if k == "conv":
                recent_from = (day - _RECENT_DAYS) * DAY_SECONDS
                recent = np.array([int(np.sum(h.ts[a:b] >= recent_from)) for a, b in zip(s, t)], dtype=np.float64)
                counts["recent_conv"] = np.log1p(recent[inv]) if len(uniq) else np.zeros(0)
        return cols, counts

    def _impressions(self, day: int) -> tuple[Partition, dict[str, _History]]:
        cfg, w = self.cfg, self.world
        rng = philox(cfg.seed, "impressions", day)
        n = cfg.impressions_per_day
        users = rng.integers(0, cfg.n_users, n)
        ads = rng.integers(0, cfg.n_ads, n)
        ts = np.floor(day * DAY_SECONDS + rng.random(n) * DAY_SECONDS)
        order = np.lexsort((ts, users))
        users, ads, ts = users[order], ads[order], ts[order]

        lrng = philox(cfg.seed, "labels", day)
        e = cfg.emb_dim
        s_uv = np.einsum("ij,ij->i", w.user_latent[users], w.ad_latent[ads]) / math.sqrt(e)
        s_seq = np.einsum("ij,ij->i", self._recent_conv_direction(users), w.ad_latent[ads])
        cross = w.user_f1[users] * w.ad_f2[ads]
        click_base = cfg.click_strength * s_uv + cfg.noise_scale * lrng.standard_normal(n)
        click = (lrng.random(n) < _sigmoid(click_base + _bisect_offset(click_base, cfg.click_rate))).astype(np.float64)
        conv_base = (cfg.latent_strength * s_uv + cfg.crossing_strength * cross + cfg.sequence_strength * s_seq
                     + cfg.click_coupling * click)
        labels = {}
        for h in CONVERSION_HEADS:
            base = conv_base + cfg.noise_scale * lrng.standard_normal(n)
            rate = cfg.positive_rate.get(h, 0.01)
            labels[h] = (lrng.random(n) < _sigmoid(base + _bisect_offset(base, rate))).astype(np.float64)
        labels["ctr"] = click

        # conversions feed tomorrow's match/conv sequences
        conv_users, conv_items, conv_actions, conv_ts = [], [], [], []
        for j, h in enumerate(CONVERSION_HEADS):
            hit = np.flatnonzero(labels[h] > 0)
            conv_users.append(users[hit])
            conv_items.append(ads[hit] + 1)
            conv_actions.append(np.full(len(hit), ACTION_IDS[_CONV_ACTIONS[h]]))
            conv_ts.append(np.minimum(ts[hit] + 60.0 * (j + 1), (day + 1) * DAY_SECONDS - 1))
        cu = np.concatenate(conv_users)
        ci = np.concatenate(conv_items).astype(np.int64)
        ca = np.concatenate(conv_actions).astype(np.int64)
        ct = np.concatenate(conv_ts)
        o = np.lexsort((ct, cu))
        cu, ci, ca, ct = cu[o], ci[o], ca[o], ct[o]
        cadv = w.ad_advertiser[ci - 1] if ci.size else np.zeros(0, dtype=np.int64)
        extra = {"conv": _History(cu, ci, ca, ct, cadv.astype(np.int64)),
                 "match": _History(cu, cadv.astype(np.int64), np.full(len(cu), ACTION_IDS["match"], dtype=np.int64),
                                   ct, cadv.astype(np.int64))}

        any_conv = np.zeros(n, dtype=bool)
        for h in CONVERSION_HEADS:
            any_conv |= labels[h] > 0
        drng = philox(cfg.seed, "downsample", day)
        keep = any_conv | (drng.random(n) < cfg.downsample_rate)
        idx = np.flatnonzero(keep)
        users_k, ads_k = users[idx], ads[idx]
        seqs, counts = self._sequences(users_k, day)
        dense = {"age": w.user_age[users_k], "f1": w.user_f1[users_k]}
        dense.update(counts)
        dense["f2"] = w.ad_f2[ads_k]
        categorical = {"gender": w.user_gender[users_k], "location": w.user_location[users_k],
                       "interest": w.user_interest[users_k], "ad_id": ads_k + 1,
                       "advertiser_id": w.ad_advertiser[ads_k]}
        pretrained = {"user_embedding": w.user_pretrained[users_k], "ad_embedding": w.ad_pretrained[ads_k]}
        kept_labels = {h: v[idx] for h, v in labels.items()}
        masks = {}
        if cfg.mask_rate > 0:
            mrng = philox(cfg.seed, "masks", day)
            masks = {h: mrng.random(len(idx)) >= cfg.mask_rate for h in CONVERSION_HEADS}
        part = Partition(day, users_k + 1, ads_k + 1, dense, categorical, pretrained, seqs, kept_labels, masks,
                         raw_negatives=int(n - any_conv.sum()))
        return part, extra

    def partition(self, day: int) -> Partition:
        if day < 0:
            raise ValueError("partition days start at 0")
        while self.day < 0:
            self._advance()
        while day not in self.cache:
            d = self.day
            part, extra = self._impressions(d)
            self.cache[d] = part
            self._advance(extra)
        return self.cache[day]


def generate_partition(world: World, day: int, simulator: Simulator | None = None) -> Partition:
    sim = simulator or Simulator(world)
    return sim.partition(day)


def generate_partitions(cfg: WorldConfig, days) -> list[Partition]:
    sim = Simulator(generate_world(cfg))
    return [sim.partition(d) for d in days]
