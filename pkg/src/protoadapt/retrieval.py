"""Constrained proximal retrieval: solver, hard sparsity, outer objective, training.

The solver runs accelerated proximal gradient with a monotone restart (any
step that would increase the objective is replaced by a plain descent step
from the previous iterate, so the recorded objective trace never increases).
Training differentiates through the unrolled solver steps with a recorded
tape and treats the hard top-r mask straight-through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .util import ValidationError, check_finite, child_rng, require, sigmoid

MAX_UNROLL = 20  # training-time unroll cap


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_vjp(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return p * (grad - float(p @ grad))


@dataclass
class ProximalConfig:
    lam: float = 1e-4
    gamma: float = 0.1
    t_prox: int = 10
    step_size: float | None = None   # None: 1 / (smax(M^T)^2 + 2 gamma)
    tol: float = 1e-9
    proximity: str = "quadratic"     # or "kl"

    def validate(self) -> None:
        require(self.lam >= 0.0, "lam must be nonnegative")
        require(self.gamma >= 0.0, "gamma must be nonnegative")
        require(1 <= self.t_prox <= MAX_UNROLL, f"t_prox must lie in [1, {MAX_UNROLL}]")
        require(self.tol > 0.0, "tol must be positive")
        require(self.proximity in ("quadratic", "kl"), "unknown proximity kind")


@dataclass
class RetrievalSolution:
    w: np.ndarray
    w_tilde: np.ndarray | None
    active_set: list
    recon_before: float | None
    recon_after: float | None
    objective_trace: list
    kkt_residual: float
    iterations: int
    restarts: int
    converged: bool


@dataclass
class _SolveTape:
    masks: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    restarts: list = field(default_factory=list)
    p: np.ndarray | None = None
    tau: float = 0.0
    gamma: float = 0.0


def _objective(w, memory, theta_hat, p, lam, gamma, proximity):
    recon = w @ memory.M - theta_hat
    val = 0.5 * float(recon @ recon) + lam * float(np.sum(w))
    if gamma > 0:
        if proximity == "quadratic":
            val += gamma * float(np.sum((w - p) ** 2))
        else:
            safe_w = np.clip(w, 1e-300, None)
            val += gamma * float(np.sum(w * np.log(safe_w / p) - w + p))
    return val


def _smooth_grad(w, memory, theta_hat, p, gamma, proximity):
    grad = memory.M @ (w @ memory.M - theta_hat)
    if gamma > 0:
        if proximity == "quadratic":
            grad = grad + 2.0 * gamma * (w - p)
        else:
            grad = grad + gamma * np.log(np.clip(w, 1e-12, None) / p)
    return grad


def solve_proximal(theta_hat, memory, v, cfg: ProximalConfig,
                   budget: int | None = None, w0: np.ndarray | None = None,
                   record_tape: bool = False):
    """Accelerated proximal gradient for the nonnegative sparse retrieval fit.

    Minimizes 0.5 ||M^T w - theta_hat||^2 + lam ||w||_1
    + gamma ||w - softmax(v)||^2 over w >= 0. The proximal map is a soft
    threshold by lam * step followed by a clamp to the nonnegative orthant.
    Stops at the prox-gradient KKT residual or after ``budget`` iterations
    (defaults to cfg.t_prox, the training unroll length; evaluation callers
    may pass a larger budget to solve to tolerance).

    Returns the pre-threshold solution; with ``record_tape`` also returns
    the iteration tape used for unrolled differentiation.
    """
    cfg.validate()
    memory.require_frozen()
    theta_hat = check_finite(theta_hat, "theta_hat")
    v = check_finite(v, "retrieval logits")
    require(v.shape[0] == memory.K, "logit length must equal K")
    p = softmax(v)

    smax = memory.operator_norm()
    lipschitz = smax**2 + 2.0 * cfg.gamma
    tau = cfg.step_size if cfg.step_size is not None else (1.0 / lipschitz if lipschitz > 0 else 1.0)
    steps = budget if budget is not None else cfg.t_prox

    w = p.copy() if w0 is None else np.clip(check_finite(w0, "w0"), 0.0, None)
    y = w.copy()
    w_prev = w.copy()
    t_mom = 1.0
    trace = [_objective(w, memory, theta_hat, p, cfg.lam, cfg.gamma, cfg.proximity)]
    tape = _SolveTape(p=p, tau=tau, gamma=cfg.gamma)
    restarts = 0
    kkt = np.inf
    converged = False

    for it in range(steps):
        grad_y = _smooth_grad(y, memory, theta_hat, p, cfg.gamma, cfg.proximity)
        z = y - tau * grad_y
        w_new = np.clip(z - tau * cfg.lam, 0.0, None)
        f_new = _objective(w_new, memory, theta_hat, p, cfg.lam, cfg.gamma, cfg.proximity)
        restarted = False
        if f_new > trace[-1] + 1e-15:
            # monotone restart: plain descent step from the last accepted point
            restarted = True
            restarts += 1
            grad_w = _smooth_grad(w, memory, theta_hat, p, cfg.gamma, cfg.proximity)
            z = w - tau * grad_w
            w_new = np.clip(z - tau * cfg.lam, 0.0, None)
            f_new = _objective(w_new, memory, theta_hat, p, cfg.lam, cfg.gamma, cfg.proximity)
            t_mom = 1.0
        if not np.isfinite(f_new):
            raise ValidationError(f"solver objective diverged at iteration {it}; trace={trace}")

        mask = w_new > 0.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom**2))
        beta = (t_mom - 1.0) / t_next
        if record_tape:
            tape.masks.append(mask)
            tape.restarts.append(restarted)
            tape.betas.append(beta)

        kkt = float(np.linalg.norm(w_new - w) / max(tau, 1e-300))
        w_prev, w = w, w_new
        y = w + beta * (w - w_prev)
        t_mom = t_next
        trace.append(f_new)
        if kkt <= cfg.tol:
            converged = True
            break

    solution = RetrievalSolution(
        w=w, w_tilde=None, active_set=[], recon_before=None, recon_after=None,
        objective_trace=trace, kkt_residual=kkt, iterations=len(trace) - 1,
        restarts=restarts, converged=converged,
    )
    return (solution, tape) if record_tape else solution


def backward_through_solve(tape: _SolveTape, memory, grad_w_final: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the unrolled solver, returning dL/dv.

    Walks the recorded iterations in reverse. Branches taken in the forward
    pass (momentum coefficients, restarts, prox masks) are treated as fixed.
    """
    m_rows = memory.M
    tau, gamma, p = tape.tau, tape.gamma, tape.p
    n_steps = len(tape.masks)
    grads_w = [np.zeros_like(grad_w_final) for _ in range(n_steps + 1)]
    grads_w[n_steps] = grad_w_final.copy()
    gp = np.zeros_like(grad_w_final)

    for k in range(n_steps, 0, -1):
        gz = np.where(tape.masks[k - 1], grads_w[k], 0.0)
        # z = y - tau * ((M M^T + 2 gamma I) y - M theta_hat - 2 gamma p)
        gy = gz - tau * (m_rows @ (gz @ m_rows) + 2.0 * gamma * gz)
        gp += tau * 2.0 * gamma * gz
        if tape.restarts[k - 1] or k == 1:
            grads_w[k - 1] += gy
        else:
            beta = tape.betas[k - 2]
            grads_w[k - 1] += (1.0 + beta) * gy
            if k >= 2:
                grads_w[k - 2] -= beta * gy
    gp += grads_w[0]
    return softmax_vjp(p, gp)


def hard_top_r(w: np.ndarray, r: int) -> np.ndarray:
    """Keep the r largest activations (ties to the lowest index), zero the rest."""
    require(r >= 1, "r must be at least 1")
    w = np.asarray(w, dtype=float)
    if r >= w.shape[0]:
        return w.copy()
    order = np.argsort(-w, kind="stable")
    keep = order[:r]
    out = np.zeros_like(w)
    out[keep] = w[keep]
    return out


def residual_change(memory, theta_hat, w: np.ndarray, w_tilde: np.ndarray):
    before = float(np.linalg.norm(w @ memory.M - theta_hat))
    after = float(np.linalg.norm(w_tilde @ memory.M - theta_hat))
    return before, after


def compose_adapter(memory, w_tilde: np.ndarray) -> np.ndarray:
    w_tilde = check_finite(w_tilde, "activations")
    require(w_tilde.shape[0] == memory.K, "activation length must equal K")
    return w_tilde @ memory.M


def retrieve(theta_hat, memory, v, cfg: ProximalConfig, r_keep: int,
             budget: int | None = None, hard_threshold: bool = True) -> RetrievalSolution:
    """Solve, then apply the hard top-r rule and fill in the residual report."""
    solution = solve_proximal(theta_hat, memory, v, cfg, budget=budget)
    w_tilde = hard_top_r(solution.w, r_keep) if hard_threshold else solution.w.copy()
    before, after = residual_change(memory, theta_hat, solution.w, w_tilde)
    solution.w_tilde = w_tilde
    solution.active_set = list(np.nonzero(w_tilde)[0])
    solution.recon_before = before
    solution.recon_after = after
    return solution


# ---------------------------------------------------------------------------
# Outer objective
# ---------------------------------------------------------------------------

def entropy_of(w: np.ndarray):
    """Shannon entropy of w / ||w||_1 with the 0 log 0 = 0 convention."""
    total = float(np.sum(w))
    if total <= 0.0:
        return 0.0
    u = w / total
    pos = u > 0
    return float(-np.sum(u[pos] * np.log(u[pos])))


def outer_objective(query_x, query_y, adapter, w_tilde, lam, eta, feature_map):
    """Query cross-entropy plus l1 and normalized-entropy penalties."""
    x = check_finite(feature_map(query_x), "query features")
    require(x.shape[0] >= 1, "query is empty")
    y = np.asarray(query_y, dtype=float)
    p = np.clip(sigmoid(x @ adapter), 1e-12, 1.0 - 1e-12)
    ce = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    l1 = float(np.sum(np.abs(w_tilde)))
    ent = entropy_of(w_tilde)
    total = ce + lam * l1 + eta * ent
    return total, {"ce": ce, "l1": l1, "entropy": ent}


def _outer_gradient_w(query_x, query_y, memory, w_tilde, lam, eta, feature_map):
    """Gradient of the outer objective with respect to the thresholded vector."""
    x = feature_map(query_x)
    y = np.asarray(query_y, dtype=float)
    adapter = w_tilde @ memory.M
    p = sigmoid(x @ adapter)
    dce_dtheta = ((p - y)[:, None] * x).mean(axis=0)
    grad = memory.M @ dce_dtheta
    grad = grad + lam * (w_tilde > 0).astype(float)
    total = float(np.sum(w_tilde))
    if eta != 0.0 and total > 0.0:
        u = w_tilde / total
        pos = u > 0
        h = -np.sum(u[pos] * np.log(u[pos]))
        ent_grad = np.zeros_like(w_tilde)
        ent_grad[pos] = (-np.log(u[pos]) - h) / total
        grad = grad + eta * ent_grad
    return grad


# ---------------------------------------------------------------------------
# Retrieval network and optimizer
# ---------------------------------------------------------------------------

class RetrievalNet:
    """Two-layer tanh map from descriptor space to K prototype logits."""

    def __init__(self, d_z: int, k: int, hidden: int = 32, seed: int = 0):
        rng = child_rng(seed, "retrieval-net")
        self.params = {
            "w1": rng.normal(size=(hidden, d_z)) / np.sqrt(d_z),
            "b1": np.zeros(hidden),
            "w2": rng.normal(size=(k, hidden)) / np.sqrt(hidden),
            "b2": np.zeros(k),
        }

    @property
    def k(self) -> int:
        return self.params["w2"].shape[0]

    def forward(self, z: np.ndarray, cache: bool = False):
        hidden = np.tanh(self.params["w1"] @ z + self.params["b1"])
        logits = self.params["w2"] @ hidden + self.params["b2"]
        return (logits, hidden) if cache else logits

    def backward(self, z, hidden, grad_logits):
        grads = {
            "w2": np.outer(grad_logits, hidden),
            "b2": grad_logits.copy(),
        }
        ghidden = self.params["w2"].T @ grad_logits
        gpre = ghidden * (1.0 - hidden**2)
        grads["w1"] = np.outer(gpre, z)
        grads["b1"] = gpre
        grad_z = self.params["w1"].T @ gpre
        return grads, grad_z

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}


class Adam:
    """Minimal Adam over a dict of parameter arrays."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        for key, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * self.params[key]
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            m_hat = self.m[key] / (1 - self.beta1**self.t)
            v_hat = self.v[key] / (1 - self.beta2**self.t)
            self.params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 40
    jaccard_min: float = 0.9
    min_delta: float = 1e-4
    seed: int = 0
    r_keep: int = 2
    eta: float = 0.01
    val_period: int = 1


@dataclass
class TrainHistoryRow:
    epoch: int
    train_loss: float
    val_auc: float
    jaccard: float


@dataclass
class TrainResult:
    net: RetrievalNet
    history: list
    stopped_epoch: int
    best_val_auc: float


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _rank_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def predict_task(task, memory, net, descriptor, theta_hat, pcfg, r_keep,
                 feature_map, transform=None, budget=None, hard_threshold=True):
    """Query probabilities from the full retrieval path for one task."""
    z = descriptor.values
    if transform is not None:
        z = transform.forward(z)
    v = net.forward(z)
    task_pcfg = _pcfg_lookup(pcfg)(task)
    solution = retrieve(theta_hat, memory, v, task_pcfg, r_keep, budget=budget,
                        hard_threshold=hard_threshold)
    adapter = compose_adapter(memory, solution.w_tilde)
    probs = sigmoid(feature_map(task.query_x) @ adapter)
    return probs, solution


def _pooled_val_auc(tasks, memory, net, descriptors, theta_hats, pcfg, r_keep,
                    feature_map, transform):
    scores, labels, actives = [], [], []
    for task in tasks:
        probs, solution = predict_task(
            task, memory, net, descriptors[task.task_id], theta_hats[task.task_id],
            pcfg, r_keep, feature_map, transform=transform)
        scores.append(probs)
        labels.append(task.query_y)
        actives.append(set(solution.active_set))
    auc = _rank_auc(np.concatenate(scores), np.concatenate(labels))
    return auc, actives


def _pcfg_lookup(pcfg):
    return pcfg if callable(pcfg) else (lambda task: pcfg)


def train_retrieval(train_tasks, memory, descriptors, theta_hats, feature_map,
                    pcfg, tcfg: TrainConfig, val_tasks=(),
                    transform=None) -> TrainResult:
    """Unrolled training of the retrieval network on the outer objective.

    Per task: forward the descriptor through the net (optionally through a
    continuous-time transform first), run the unrolled proximal solve, apply
    the straight-through hard top-r mask, evaluate the outer objective on
    the query set, and backpropagate through every solver iteration back to
    the network parameters. Early stopping combines a validation-score
    plateau (patience epochs without improvement) with an active-set
    stability requirement (Jaccard overlap between consecutive epochs).
    """
    memory.require_frozen()
    require(len(train_tasks) >= 1, "no training tasks")
    pcfg_of = _pcfg_lookup(pcfg)
    ids = [t.task_id for t in train_tasks]
    d_z = descriptors[ids[0]].values.shape[0]
    net = RetrievalNet(d_z=d_z, k=memory.K, seed=tcfg.seed)
    opt = Adam(net.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)

    history: list[TrainHistoryRow] = []
    best_auc, best_params, since_best = -np.inf, net.snapshot(), 0
    prev_actives = None

    for epoch in range(tcfg.epochs):
        rng = child_rng(tcfg.seed, "epochs", epoch)
        order = rng.permutation(len(train_tasks))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            grads = {k: np.zeros_like(v) for k, v in net.params.items()}
            transform_batch = []
            for i in batch:
                task = train_tasks[i]
                task_pcfg = pcfg_of(task)
                z_raw = descriptors[task.task_id].values
                z = transform.forward(z_raw) if transform is not None else z_raw
                logits, hidden = net.forward(z, cache=True)
                theta_hat = theta_hats[task.task_id]
                solution, tape = solve_proximal(theta_hat, memory, logits, task_pcfg,
                                                record_tape=True)
                w_tilde = hard_top_r(solution.w, tcfg.r_keep)
                adapter = compose_adapter(memory, w_tilde)
                loss, _ = outer_objective(task.query_x, task.query_y, adapter,
                                          w_tilde, task_pcfg.lam, tcfg.eta, feature_map)
                losses.append(loss)
                grad_w_tilde = _outer_gradient_w(task.query_x, task.query_y, memory,
                                                 w_tilde, task_pcfg.lam, tcfg.eta, feature_map)
                # straight-through: the top-r mask passes the gradient unchanged
                grad_v = backward_through_solve(tape, memory, grad_w_tilde)
                task_grads, grad_z = net.backward(z, hidden, grad_v)
                for key in grads:
                    grads[key] += task_grads[key] / len(batch)
                if transform is not None:
                    transform_batch.append((z_raw, grad_z / len(batch)))
            opt.step(grads)
            if transform is not None and transform_batch:
                transform.apply_batch(transform_batch)

        val_auc, jac = np.nan, 1.0
        if val_tasks and epoch % tcfg.val_period == 0:
            val_auc, actives = _pooled_val_auc(val_tasks, memory, net, descriptors,
                                               theta_hats, pcfg, tcfg.r_keep,
                                               feature_map, transform)
            if prev_actives is not None:
                jac = float(np.mean([_jaccard(a, b) for a, b in zip(actives, prev_actives)]))
            prev_actives = actives
            if val_auc > best_auc + tcfg.min_delta:
                best_auc, best_params, since_best = val_auc, net.snapshot(), 0
            else:
                since_best += 1
        history.append(TrainHistoryRow(epoch=epoch, train_loss=float(np.mean(losses)),
                                       val_auc=float(val_auc), jaccard=jac))
        if val_tasks and since_best >= tcfg.patience and jac >= tcfg.jaccard_min:
            break

    if val_tasks and np.isfinite(best_auc):
        net.params.update(best_params)
    return TrainResult(net=net, history=history, stopped_epoch=len(history) - 1,
                       best_val_auc=float(best_auc if np.isfinite(best_auc) else np.nan))


# ---------------------------------------------------------------------------
# Validation sweep over the penalty surface
# ---------------------------------------------------------------------------

def sweep_lambda_eta(lam_grid, eta_grid, tasks, memory, net, descriptors,
                     theta_hats, pcfg_base: ProximalConfig, r_keep, feature_map,
                     transform=None, budget=None):
    """Validation surface over (lam, eta): pooled AUC and sparsity averages."""
    require(len(lam_grid) >= 1 and len(eta_grid) >= 1, "grids must be nonempty")
    rows = []
    for lam in lam_grid:
        for eta in eta_grid:
            pcfg = ProximalConfig(lam=lam, gamma=pcfg_base.gamma,
                                  t_prox=pcfg_base.t_prox, step_size=pcfg_base.step_size,
                                  tol=pcfg_base.tol, proximity=pcfg_base.proximity)
            scores, labels = [], []
            l0_pre, l0_post, objective = [], [], []
            for task in tasks:
                probs, solution = predict_task(task, memory, net, descriptors[task.task_id],
                                               theta_hats[task.task_id], pcfg, r_keep,
                                               feature_map, transform=transform, budget=budget)
                scores.append(probs)
                labels.append(task.query_y)
                l0_pre.append(int(np.sum(solution.w > 1e-10)))
                l0_post.append(int(np.sum(solution.w_tilde > 1e-10)))
                adapter = compose_adapter(memory, solution.w_tilde)
                total, _ = outer_objective(task.query_x, task.query_y, adapter,
                                           solution.w_tilde, lam, eta, feature_map)
                objective.append(total)
            rows.append({
                "lam": lam, "eta": eta,
                "auc": _rank_auc(np.concatenate(scores), np.concatenate(labels)),
                "mean_l0_pre": float(np.mean(l0_pre)),
                "mean_l0_post": float(np.mean(l0_post)),
                "mean_objective": float(np.mean(objective)),
            })
    return rows
