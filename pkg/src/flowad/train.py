"""Optimization loop: Adam, warm-up cosine schedule, early stopping, checkpoints.

Each training step draws one Monte Carlo sample per image from each prompt
distribution, encodes all B prompt pairs per image, and picks one bank
uniformly at random for the alignment and classification terms; the
orthogonality loss always sees all B pairs. Fixed seed implies a
bit-identical trajectory.
"""

from __future__ import annotations

import math

import numpy as np

from . import losses as losses_mod
from .align import aggregate, text_image_probs
from .config import TrainConfig, parse_config_text
from .errors import ConfigError, DataError, NumericError
from .metrics import auroc
from .model import PromptFlowModel
from .prompts import orthogonal_loss
from .records import load_checkpoint, load_images, save_checkpoint
from .rng import Rng
from .tensor import Tensor, concat

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {p.name} at Adam step {self.t}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(optimizer, lr):
    optimizer.step(lr)


def lr_at(step, total_steps, config):
    """Linear warm-up from 0 followed by cosine decay to 0 at total_steps."""
    warmup = min(math.ceil(config.warmup_frac * total_steps), max(total_steps - 1, 0))
    if step < warmup:
        return config.lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def step_loss(model, images, config, rng, bank_idx):
    """LossBreakdown of one batch with a single Monte Carlo sample per image."""
    projected_all = []
    x_rows = []
    for img in images:
        proj = model.project_record(img.layers)
        ge = model.global_embed(img.x_cls, proj)
        projected_all.append(proj)
        x_rows.append(ge.x.reshape(1, -1))
    x_all = concat(x_rows, axis=0)
    samples = model.sample_distributions(x_all, rng.child(0))

    zero = Tensor(np.zeros(()))
    l_ort, l_focal, l_dice = zero, zero, zero
    prob_rows = []
    labels = []
    for i, img in enumerate(images):
        cls_emb = model.class_embedding(img.category)
        pairs = [
            model.text_pair(
                b,
                samples["ctx"].phi[i],
                samples["normal"].phi[i],
                samples["abnormal"].phi[i],
                cls_emb,
            )
            for b in range(config.B)
        ]
        l_ort = l_ort + orthogonal_loss(pairs)
        zt = pairs[bank_idx].as_matrix()
        maps = model.layer_maps(
            projected_all[i], zt, (img.grid_h, img.grid_w), (img.out_h, img.out_w)
        )
        m_agg = aggregate(maps)
        y = img.mask.astype(np.float64)
        p_correct = m_agg * Tensor(y) + (1.0 - m_agg) * Tensor(1.0 - y)
        l_focal = l_focal + losses_mod.focal_loss(p_correct)
        l_dice = l_dice + losses_mod.dice_loss(y, m_agg)
        prob_rows.append(text_image_probs(x_all[i], zt, model.logit_scale).reshape(1, -1))
        labels.append(img.label)

    inv = 1.0 / len(images)
    l_cls = losses_mod.cls_loss(concat(prob_rows, axis=0), labels)
    l_flow = losses_mod.flow_reg(list(samples.values()))
    return losses_mod.total_loss(l_ort * inv, l_flow, l_cls, l_focal * inv, l_dice * inv)


def validation_metric(model, images, config, rng):
    """Mean of pooled image AUROC and pixel AUROC (early-stopping criterion)."""
    from .infer import run_inference

    results = run_inference(model, images, config.R_train, "image", rng)
    labels = [r["label"] for r in results]
    scores = [r["score"] for r in results]
    flat_maps = np.concatenate([r["map"].ravel() for r in results])
    flat_masks = np.concatenate([r["mask"].ravel() for r in results])
    return 0.5 * (auroc(scores, labels) + auroc(flat_maps, flat_masks))


def build_model_for(images, config):
    """Model dimensioned from the records, hyperparameters from the config."""
    first = images[0]
    if any(img.joint_dim != first.joint_dim or img.raw_dim != first.raw_dim for img in images):
        raise DataError("records disagree on C or D_raw", code="shape_mismatch")
    n_layers = first.layers.shape[0]
    if n_layers != len(config.layers):
        raise ConfigError(
            f"records carry {n_layers} layers but config names {len(config.layers)}"
        )
    return PromptFlowModel(
        dim=first.joint_dim,
        raw_dim=first.raw_dim,
        n_layers=n_layers,
        banks=config.B,
        ctx_len=config.P,
        state_len=config.Q,
        flow_depth=config.K,
        logit_scale=config.logit_scale,
        encoder_seed=0,
        init_seed=config.seed,
    )


def train_loop(manifest, config, checkpoint_path=None, log_path=None, verbose=False):
    """Train on the manifest's train split, early-stop on the val split.

    Returns a dict with the trained model (best validation weights restored),
    per-epoch history, and the per-step log lines.
    """
    train_images = load_images(manifest, "train")
    val_images = load_images(manifest, "val")
    if not train_images:
        raise DataError("manifest has no training entries", code="missing_file")
    if not val_images:
        raise DataError("manifest has no validation entries", code="missing_file")

    model = build_model_for(train_images, config)
    optimizer = Adam(model.parameters())
    root = Rng(config.seed, path=(1,))

    n = len(train_images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    log_lines = ["# step l_ort l_flow_reg l_cls l_focal l_dice total"]
    history = []
    best_metric = -np.inf
    best_state = None
    best_epoch = -1
    bad_epochs = 0
    global_step = 0

    for epoch in range(config.epochs):
        perm = root.child(10, epoch).permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = [train_images[int(j)] for j in perm[lo : lo + config.batch_size]]
            step_rng = root.child(20, global_step)
            bank_idx = int(step_rng.child(0).integers(0, config.B))
            optimizer.zero_grad()
            breakdown = step_loss(model, batch, config, step_rng.child(1), bank_idx)
            scalars = breakdown.scalars()
            if not all(np.isfinite(v) for v in scalars.values()):
                raise NumericError(f"non-finite loss at step {global_step}: {scalars}")
            breakdown.total.backward()
            optimizer.step(lr_at(global_step, total_steps, config))
            log_lines.append(
                f"{global_step} {scalars['l_ort']:.10g} {scalars['l_flow_reg']:.10g} "
                f"{scalars['l_cls']:.10g} {scalars['l_focal']:.10g} "
                f"{scalars['l_dice']:.10g} {scalars['total']:.10g}"
            )
            global_step += 1

        metric = validation_metric(model, val_images, config, root.child(30))
        history.append({"epoch": epoch, "val_metric": metric, "loss": scalars["total"]})
        if verbose:
            print(f"epoch {epoch}: val metric {metric:.4f} loss {scalars['total']:.4f}")
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in model.named_parameters().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if best_state is not None:
        named = model.named_parameters()
        for name, data in best_state.items():
            named[name].data[...] = data

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    if checkpoint_path is not None:
        save_model_checkpoint(
            checkpoint_path, model, config,
            extra={"best_metric": best_metric, "best_epoch": best_epoch, "steps": global_step},
        )
    return {
        "model": model,
        "history": history,
        "best_metric": best_metric,
        "best_epoch": best_epoch,
        "steps": global_step,
        "log_lines": log_lines,
    }


# -- checkpoint wiring ----------------------------------------------------------


def save_model_checkpoint(path, model, config, extra=None):
    meta = {f"model.{k}": v for k, v in model.meta().items()}
    for line in config.to_text().strip().splitlines():
        key, _, value = line.partition("=")
        meta[f"train.{key.strip()}"] = value.strip()
    for k, v in (extra or {}).items():
        meta[f"extra.{k}"] = v
    save_checkpoint(path, {name: p.data for name, p in model.named_parameters().items()}, meta)


def load_model_checkpoint(path):
    """Rebuild (model, config, extra) from a checkpoint file."""
    params, meta = load_checkpoint(path)
    model_meta = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    config_text = "\n".join(
        f"{k[len('train.'):]} = {v}" for k, v in meta.items() if k.startswith("train.")
    )
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    model = PromptFlowModel.from_meta(model_meta)
    named = model.named_parameters()
    if set(named) != set(params):
        missing = set(named) ^ set(params)
        raise DataError(f"checkpoint parameters do not match the model: {sorted(missing)}",
                        code="shape_mismatch")
    for name, p in named.items():
        if params[name].shape != p.data.shape:
            raise DataError(f"checkpoint blob {name} has shape {params[name].shape}, "
                            f"expected {p.data.shape}", code="shape_mismatch")
        p.data[...] = params[name]
    config = parse_config_text(config_text) if config_text else TrainConfig()
    return model, config, extra
