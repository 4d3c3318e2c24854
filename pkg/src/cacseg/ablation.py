"""Named ablation grids: loss combinations, distillation forms, logit types, classifier formation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .data import Dataset
from .train import EVAL_MODES, RunConfig, evaluate, train


@dataclass(frozen=True)
class Variant:
    name: str
    description: str
    overrides: dict

    def config(self, seed: int, **extra) -> RunConfig:
        return RunConfig().with_updates(**{**self.overrides, **extra, "seed": seed, "variant": self.name})


_BASELINE = dict(ce=True, ce_p=False, ce_y=False, kl_variant="none", eval_mode="original")

LOSS_SUITE = [
    Variant("a", "ce (baseline)", _BASELINE),
    Variant("b", "ce_p", dict(ce=False, ce_p=True, ce_y=False, kl_variant="none")),
    Variant("c", "ce + ce_p", dict(ce_y=False, kl_variant="none")),
    Variant("d", "ce + ce_p + ce_y", dict(kl_variant="none")),
    Variant("e", "ce + ce_p + kl", dict(ce_y=False)),
    Variant("f", "ce + ce_p + ce_y + kl", {}),
    Variant("g", "ce + ce_p + ce_y + 0.1 kl", dict(lambda_kl=0.1)),
    Variant("h", "ce + ce_p + ce_y + 10 kl", dict(lambda_kl=10.0)),
]

KL_SUITE = [
    Variant("a", "without kl", dict(kl_variant="none")),
    Variant("b", "vanilla kl", dict(kl_variant="vanilla")),
    Variant("c", "entropy kl", dict(kl_variant="entropy")),
    Variant("d", "class-wise kl", dict(kl_variant="classwise")),
    Variant("e", "class-wise entropy kl", dict(kl_variant="classwise_entropy")),
    Variant("1", "class-wise entropy kl, entropy from p_p", dict(entropy_source="estimated")),
    Variant("2", "class-wise entropy kl, entropy from p", dict(entropy_source="original")),
]

COSINE_SUITE = [
    Variant("a", "original (dot)", _BASELINE),
    Variant("b", "original (cos)", dict(_BASELINE, original_logits="cos")),
    Variant("c", "original (dot) + context (dot)", dict(context_logits="dot")),
    Variant("d", "original (dot) + context (cos), tau 15", {}),
    Variant("e", "original (cos) + context (cos)", dict(original_logits="cos")),
    Variant("1", "variant d with tau 5", dict(tau=5.0)),
    Variant("2", "variant d with tau 10", dict(tau=10.0)),
    Variant("3", "variant d with tau 20", dict(tau=20.0)),
]


def _both(formation: str) -> dict:
    return dict(formation_y=formation, formation_p=formation)


FORMATION_SUITE = [
    Variant("baseline", "shared classifier only", _BASELINE),
    Variant("a", "A = P", _both("proto")),
    Variant("b", "A = P + C", _both("proto_plus_c")),
    Variant("c", "A = theta(P)", _both("proj_proto")),
    Variant("d", "A = theta(P + C)", _both("proj_sum")),
    Variant("#", "A = theta(P (+) C)", _both("concat")),
    Variant("e", "A = theta(P (+) C) + C", _both("concat_res")),
    Variant("f", "A_y = C_y, A_p = theta_p(C_p (+) C)", dict(formation_y="proto", formation_p="concat")),
    Variant("g", "A_y = theta_y(C_y (+) C), A_p = C_p", dict(formation_y="concat", formation_p="proto")),
    Variant("h", "A_y = C, A_p = theta_p(C_p (+) C)", dict(formation_y="classifier", formation_p="concat")),
    Variant("i", "A_y = theta_y(C_y (+) C), A_p = C", dict(formation_y="concat", formation_p="classifier")),
]

SUITES = {"loss": LOSS_SUITE, "kl": KL_SUITE, "cosine": COSINE_SUITE, "formation": FORMATION_SUITE}

CSV_HEADER = ["suite", "variant", "description", "seed", "eval_mode", "miou"] + [f"miou_{m}" for m in EVAL_MODES]


@dataclass
class AblationRow:
    suite: str
    variant: str
    description: str
    seed: int
    eval_mode: str
    miou: dict

    def cells(self) -> list:
        return ([self.suite, self.variant, self.description, self.seed, self.eval_mode,
                 repr(self.miou[self.eval_mode])] + [repr(self.miou[m]) for m in EVAL_MODES])


def run_suite(suite: str, train_set: Dataset, val_set: Dataset, seeds: Iterable[int],
              config_dir: Optional[Path] = None, on_row: Optional[Callable[[AblationRow], None]] = None,
              **extra) -> list[AblationRow]:
    """Train and evaluate every variant of ``suite`` for each seed, sequentially."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {sorted(SUITES)}")
    rows = []
    for variant in SUITES[suite]:
        for seed in seeds:
            cfg = variant.config(seed, **extra)
            if config_dir is not None:
                config_dir.mkdir(parents=True, exist_ok=True)
                tag = "hash" if variant.name == "#" else variant.name
                (config_dir / f"{suite}_{tag}_seed{seed}.cfg").write_text(cfg.dumps())
            ckpt, _ = train(cfg, train_set, val_set)
            miou = {m: evaluate(ckpt, val_set, m).miou for m in EVAL_MODES}
            row = AblationRow(suite, variant.name, variant.description, seed, cfg.eval_mode, miou)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def rows_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.cells())
    return buf.getvalue()
