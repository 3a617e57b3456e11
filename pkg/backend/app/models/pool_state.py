# models/pool_state.py
from dataclasses import dataclass, field, replace

from backend.app.utils.error_handlers import InvalidInputError


@dataclass(frozen=True)
class PoolState:
    """
    Sample-id sets of the active-learning pool plus the budget ledger.

    `ledger` holds the number of images annotated in each completed round,
    so `budget_spent == sum(ledger)`.
    """
    source_labeled: frozenset = field(default_factory=frozenset)
    target_labeled: frozenset = field(default_factory=frozenset)
    target_unlabeled: frozenset = field(default_factory=frozenset)
    budget_spent: int = 0
    round: int = 0
    ledger: tuple = field(default_factory=tuple)
    initial_pool_size: int = None

    def __post_init__(self):
        for name in ("source_labeled", "target_labeled", "target_unlabeled"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        object.__setattr__(self, "ledger", tuple(int(n) for n in self.ledger))
        if self.initial_pool_size is None:
            object.__setattr__(self, "initial_pool_size", len(self.target_unlabeled))
        overlap = (
            (self.source_labeled & self.target_labeled)
            | (self.source_labeled & self.target_unlabeled)
            | (self.target_labeled & self.target_unlabeled)
        )
        if overlap:
            raise InvalidInputError(f"ids present in more than one pool set: {sorted(overlap)[:5]}")
        if self.budget_spent != sum(self.ledger):
            raise InvalidInputError("budget_spent does not match the annotation ledger")

    @property
    def size(self):
        return len(self.source_labeled) + len(self.target_labeled) + len(self.target_unlabeled)

    @property
    def labeled(self):
        return self.source_labeled | self.target_labeled

    def annotate(self, ids):
        """Move `ids` from unlabeled to labeled target and close the round."""
        ids = list(ids)
        missing = [i for i in ids if i not in self.target_unlabeled]
        if missing:
            raise InvalidInputError(f"ids not in the unlabeled pool: {missing[:5]}")
        chosen = frozenset(ids)
        return replace(
            self,
            target_labeled=self.target_labeled | chosen,
            target_unlabeled=self.target_unlabeled - chosen,
            budget_spent=self.budget_spent + len(chosen),
            round=self.round + 1,
            ledger=self.ledger + (len(chosen),),
        )

    def drop_source(self):
        return replace(self, source_labeled=frozenset())

    def to_dict(self):
        return {
            'source_labeled': sorted(self.source_labeled),
            'target_labeled': sorted(self.target_labeled),
            'target_unlabeled': sorted(self.target_unlabeled),
            'budget_spent': self.budget_spent,
            'round': self.round,
            'ledger': list(self.ledger),
            'initial_pool_size': self.initial_pool_size,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            source_labeled=data.get('source_labeled', []),
            target_labeled=data.get('target_labeled', []),
            target_unlabeled=data.get('target_unlabeled', []),
            budget_spent=int(data.get('budget_spent', 0)),
            round=int(data.get('round', 0)),
            ledger=data.get('ledger', []),
            initial_pool_size=data.get('initial_pool_size'),
        )

    @classmethod
    def from_manifests(cls, source=None, target=None, source_free=False):
        """Initial state: labeled target entries start labeled, the rest unlabeled."""
        source_ids = [] if source_free or source is None else [e.id for e in source if e.is_labeled]
        target_entries = list(target or [])
        return cls(
            source_labeled=source_ids,
            target_labeled=[e.id for e in target_entries if e.is_labeled],
            target_unlabeled=[e.id for e in target_entries if not e.is_labeled],
        )
