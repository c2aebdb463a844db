"""Fast self-checks of the load-bearing invariants.

Each check is independent, seeded, and runs in well under a second; the
CLI ``verify`` subcommand prints one line per check. These complement the
test suite: they can run in production environments where the tests are
not installed.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import (Role, SequenceLayout, Slot, build_causal_mask,
                       build_stage1_mask, embed_layout, encode_layout,
                       forward_blocks, global_layout, init_params,
                       item_logits, transformer_forward)
from .checkpoint import ChecksumError as ParamsChecksumError
from .checkpoint import deserialize_params, serialize_params
from .evaluation import rank_of_target
from .memory import (ChecksumError, OVERWRITE, deserialize_memory,
                     init_memory, serialize_memory)


def _tiny(seed, C=2, l_seg=4, catalog=17):
    return init_params(catalog, d=8, n_layers=2, n_heads=2, C=C,
                       n_positions=l_seg, kind="mem", seed=seed)


def check_stage1_equivalence(seed=0, trials=3, tol=1e-5):
    """Interleaved-mask query outputs == per-prefix causal forwards."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        params = _tiny(seed + t)
        k = int(rng.integers(2, 4))
        segs = [[int(x) for x in rng.integers(0, 17, size=4)]
                for _ in range(k)]
        layout = global_layout(segs, 2)
        inter = transformer_forward(embed_layout(layout, None, params),
                                    build_stage1_mask(layout), params)
        for h in range(k):
            lo, hi = layout.query_block(h)
            sub = global_layout(segs[: h + 1], 2)
            one = transformer_forward(embed_layout(sub, None, params),
                                      build_stage1_mask(sub), params)
            slo, shi = sub.query_block(h)
            diff = float(np.abs(inter.data[lo:hi] - one.data[slo:shi]).max())
            worst = max(worst, diff)
    return "stage1-equivalence", worst < tol, f"max abs diff {worst:.2e}"


def check_causality(seed=0):
    """Perturbing a future item leaves earlier rows bit-identical."""
    params = _tiny(seed)
    items = [1, 5, 3, 2]
    layout = encode_layout(0, items, 2)
    base = transformer_forward(embed_layout(layout, None, params),
                               build_causal_mask(layout), params)
    bumped = encode_layout(0, items[:-1] + [11], 2)
    out = transformer_forward(embed_layout(bumped, None, params),
                              build_causal_mask(bumped), params)
    same = np.array_equal(base.data[:3], out.data[:3])
    return "bit-exact-causality", same, "rows before the edit compared bitwise"


def check_gradients(seed=0, tol=1e-3):
    """Reverse-mode grads against central finite differences."""
    rng = np.random.default_rng(seed)
    x = T.tensor(rng.normal(size=(3, 4)).astype(np.float32),
                 requires_grad=True)
    w = T.tensor(rng.normal(size=(4, 4)).astype(np.float32),
                 requires_grad=True)

    def forward():
        h = T.gelu(T.matmul(x, w))
        return T.cross_entropy(T.layer_norm(h), [0, 2, 1])

    loss = forward()
    T.backward(loss)
    worst = 0.0
    h_step = 1e-3
    for t in (x, w):
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=6, replace=False):
            keep = flat[idx]
            flat[idx] = keep + h_step
            up = forward().item()
            flat[idx] = keep - h_step
            down = forward().item()
            flat[idx] = keep
            fd = (up - down) / (2 * h_step)
            denom = max(abs(fd), abs(grad[idx]), 1.0)
            worst = max(worst, abs(fd - grad[idx]) / denom)
    return "gradient-check", worst < tol, f"max rel err {worst:.2e}"


def check_metric_rank(seed=0, cases=200):
    """Counting rank == sorting rank with the ascending-id tie-break."""
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        n = int(rng.integers(2, 30))
        scores = rng.choice([0.0, 1.0, 2.0], size=n).astype(np.float32)
        target = int(rng.integers(0, n))
        order = sorted(range(n), key=lambda i: (-scores[i], i))
        if rank_of_target(scores, target) != order.index(target) + 1:
            return "metric-rank", False, f"disagreement at n={n}"
    return "metric-rank", True, f"{cases} tied cases"


def check_memory_roundtrip(seed=0):
    params = _tiny(seed)
    state = init_memory([1, 5, 3, 2], params, OVERWRITE)
    blob = serialize_memory(state)
    back = deserialize_memory(blob)
    if not np.array_equal(back.content, state.content):
        return "memory-roundtrip", False, "content changed"
    corrupt = bytearray(blob)
    corrupt[-5] ^= 0xFF
    try:
        deserialize_memory(bytes(corrupt))
        return "memory-roundtrip", False, "corruption not detected"
    except ChecksumError:
        return "memory-roundtrip", True, "round trip + corruption detected"


def check_params_roundtrip(seed=0):
    params = _tiny(seed)
    blob = serialize_params(params)
    back = deserialize_params(blob, params.arch)
    for (name, a), (_, b) in zip(params.named(), back.named()):
        if a.data.tobytes() != b.data.tobytes():
            return "params-roundtrip", False, f"{name} changed"
    corrupt = bytearray(blob)
    corrupt[50] ^= 0xFF
    try:
        deserialize_params(bytes(corrupt), params.arch)
        return "params-roundtrip", False, "corruption not detected"
    except ParamsChecksumError:
        return "params-roundtrip", True, "round trip + corruption detected"


def check_optimizer_trace():
    """Two steps with unit gradients move 1.0 to 0.8 (closed form)."""
    w = T.tensor(np.array(1.0, dtype=np.float32), requires_grad=True)
    opt = T.AdamW([w], lr=0.1, weight_decay=0.0, eps=0.0)
    for _ in range(2):
        w.grad = np.array(1.0, dtype=np.float32)
        opt.step()
    err = abs(float(w.data) - 0.8)
    return "optimizer-trace", err < 1e-6, f"|w - 0.8| = {err:.2e}"


def check_block_batching(seed=0, tol=1e-6):
    """Block-diagonal batched forward == independent forwards."""
    params = _tiny(seed)
    blocks = []
    singles = []
    for items in ([1, 5, 3], [2, 7, 7, 0], [9, 4]):
        lay = SequenceLayout([Slot(Role.ITEM, 0, i, it)
                              for i, it in enumerate(items)])
        emb = embed_layout(lay, None, params)
        mask = build_causal_mask(lay)
        blocks.append((emb, mask))
        singles.append(transformer_forward(emb, mask, params))
    outs = forward_blocks(blocks, params)
    worst = max(float(np.abs(a.data - b.data).max())
                for a, b in zip(outs, singles))
    return "block-batching", worst < tol, f"max abs diff {worst:.2e}"


def check_prediction_determinism(seed=0):
    params = _tiny(seed)
    lay = encode_layout(0, [1, 5, 3], 2)
    runs = []
    for _ in range(2):
        out = transformer_forward(embed_layout(lay, None, params),
                                  build_causal_mask(lay), params)
        runs.append(item_logits(out, params).data.copy())
    same = np.array_equal(runs[0], runs[1])
    return "forward-determinism", same, "two forwards compared bitwise"


ALL_CHECKS = (check_stage1_equivalence, check_causality, check_gradients,
              check_metric_rank, check_memory_roundtrip,
              check_params_roundtrip, check_optimizer_trace,
              check_block_batching, check_prediction_determinism)


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for check in ALL_CHECKS:
        try:
            results.append(check() if check is check_optimizer_trace
                           else check(seed))
        except Exception as e:  # a crashed check is a failed check
            results.append((check.__name__, False, f"raised {e!r}"))
    return results
