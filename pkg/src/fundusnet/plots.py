"""Figure files for the class distribution, training curves and confusion matrices."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import ORIENTATION


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_distribution(report, path):
    fig, (ax_bar, ax_pie) = plt.subplots(1, 2, figsize=(10, 4))
    ax_bar.bar(report.class_names, report.counts, color="tab:blue")
    ax_bar.set_ylabel("images")
    ax_bar.tick_params(axis="x", rotation=30)
    ax_pie.pie(report.counts, labels=report.class_names, autopct="%1.1f%%")
    fig.suptitle("Image distribution between classes")
    return _save(fig, path)


def plot_history(history, path, title="Training accuracy and loss"):
    epochs = [r.epoch for r in history.records]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    ax_acc.plot(epochs, history.column("train_acc"), marker="o", label="train")
    ax_acc.plot(epochs, history.column("val_acc"), marker="o", label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    ax_loss.plot(epochs, history.column("train_loss"), marker="o", label="train")
    ax_loss.plot(epochs, history.column("val_loss"), marker="o", label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    for b in history.boundaries:
        for ax in (ax_acc, ax_loss):
            ax.axvline(b + 0.5, color="gray", linestyle="--", linewidth=0.8)
    fig.suptitle(title)
    return _save(fig, path)


def plot_confusion(cm, path, title="Confusion matrix"):
    k = cm.num_classes
    fig, ax = plt.subplots(figsize=(1.2 * k + 3, 1.2 * k + 2))
    im = ax.imshow(cm.counts, cmap="Blues")
    fig.colorbar(im, ax=ax)
    ax.set_xticks(range(k), cm.class_names, rotation=30, ha="right")
    ax.set_yticks(range(k), cm.class_names)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    threshold = cm.counts.max() / 2 if cm.counts.size else 0
    for i in range(k):
        for j in range(k):
            v = int(cm.counts[i, j])
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > threshold else "black")
    ax.set_title(f"{title}\n({ORIENTATION})", fontsize=10)
    return _save(fig, path)
