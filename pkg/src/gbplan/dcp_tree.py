"""Policy tree over semantic actions with at most one action change per trace.

The tree is rebuilt every cycle with the ongoing action at the root.  Each
root-to-leaf trace is one ego policy sequence; traces either keep the
ongoing action throughout or switch once to another action and hold it.
"""

from dataclasses import dataclass, field

from .errors import EmptyActionSet
from .world import Lateral, SemanticAction


@dataclass(frozen=True)
class PolicySequence:
    actions: tuple

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    @property
    def total_horizon(self):
        return sum(a.duration for a in self.actions)

    @property
    def templates(self):
        return tuple((int(a.lateral), int(a.longitudinal)) for a in self.actions)

    @property
    def codes(self):
        return tuple(a.code for a in self.actions)

    def same_templates(self, other) -> bool:
        return other is not None and self.templates == other.templates

    def __len__(self):
        return len(self.actions)

    def __str__(self):
        return " -> ".join(f"{a.lateral.name}/{a.longitudinal.name[:3]}" for a in self.actions)

    def to_json(self):
        return [[a.lateral.name, a.longitudinal.name, round(a.duration, 6)] for a in self.actions]


@dataclass
class Node:
    action: SemanticAction
    children: list = field(default_factory=list)
    changed: bool = False


@dataclass
class DcpTree:
    root: Node
    height: int
    action_set: list
    pruned: list = field(default_factory=list)

    def leaves(self):
        """Root-to-leaf traces in depth-first order."""
        out = []

        def walk(node, path):
            path = path + [node.action]
            if not node.children:
                out.append(path)
            for c in node.children:
                walk(c, path)

        walk(self.root, [])
        return out


def leaf_count(n_actions, height):
    """Number of one-change traces for ``height`` > 1."""
    return (n_actions - 1) * (height - 2) + n_actions


def update_dcp_tree(action_set, ongoing: SemanticAction, height=4, feasible_lateral=None):
    """Build the tree rooted at ``ongoing``.

    ``feasible_lateral`` is the set of lateral actions that have a target lane
    from the ego's pose; changes to other lateral actions are pruned and
    listed in ``tree.pruned``.  The root itself is never pruned.
    """
    if not action_set:
        raise EmptyActionSet("action set is empty")
    if height < 1:
        raise ValueError("tree height must be at least 1")
    templates = [a for a in action_set]
    if not any(a.same_template(ongoing) for a in templates):
        raise ValueError(f"ongoing action {ongoing} is not in the action set")
    root = Node(ongoing)
    tree = DcpTree(root, height, templates)

    def ok(a):
        return feasible_lateral is None or a.lateral in feasible_lateral

    def expand(node, depth):
        if depth == height:
            return
        if node.changed:
            child = Node(node.action, changed=True)
            node.children.append(child)
            expand(child, depth + 1)
            return
        for a in templates:
            same = a.same_template(node.action)
            if not same and not ok(a):
                tree.pruned.append((depth, a))
                continue
            child = Node(node.action if same else a, changed=not same)
            node.children.append(child)
            expand(child, depth + 1)

    expand(root, 1)
    return tree


def extract_policy_sequences(tree: DcpTree, horizon=8.0, node_duration=2.0):
    """One PolicySequence per leaf, depth-first.

    The root keeps its remaining duration; middle nodes last ``node_duration``
    and the final node absorbs the rest so every sequence spans ``horizon``.
    """
    seqs = []
    for path in tree.leaves():
        seqs.append(_timed(path, horizon, node_duration))
    return seqs


def _timed(path, horizon, node_duration):
    h = len(path)
    if h == 1:
        return PolicySequence([path[0].with_duration(horizon)])
    root_dur = min(path[0].duration, horizon)
    durs = [root_dur] + [node_duration] * (h - 2)
    last = horizon - sum(durs)
    if last <= 0:
        raise ValueError("horizon too short for the tree height")
    durs.append(last)
    return PolicySequence([a.with_duration(d) for a, d in zip(path, durs)])


def advance_ongoing(best: PolicySequence, replan_dt, node_duration=2.0, eps=1e-6) -> SemanticAction:
    """Ongoing action for the next cycle after ``replan_dt`` seconds of execution."""
    if replan_dt <= 0:
        raise ValueError("replan_dt must be positive")
    first = best.actions[0]
    remaining = first.duration - replan_dt
    if remaining > eps:
        return first.with_duration(remaining)
    nxt = best.actions[1] if len(best.actions) > 1 else first
    return nxt.with_duration(node_duration)


def mpdm_sequences(action_set, height=4, horizon=8.0, node_duration=2.0, feasible_lateral=None):
    """Constant sequences, one per action (the single-policy baseline)."""
    out = []
    for a in action_set:
        if feasible_lateral is not None and a.lateral not in feasible_lateral:
            continue
        out.append(_timed([a.with_duration(node_duration)] * height, horizon, node_duration))
    return out


def one_change(templates) -> bool:
    changes = [i for i in range(len(templates) - 1) if templates[i + 1] != templates[i]]
    return len(changes) <= 1
