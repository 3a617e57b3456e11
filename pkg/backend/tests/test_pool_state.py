import unittest

from backend.app.models.pool_state import PoolState
from backend.app.utils.error_handlers import InvalidInputError


class PoolStateTestCase(unittest.TestCase):

    def setUp(self):
        self.state = PoolState(
            source_labeled={'s1', 's2'},
            target_unlabeled={'t1', 't2', 't3', 't4'},
        )

    def test_initial_pool_size(self):
        self.assertEqual(self.state.initial_pool_size, 4)
        self.assertEqual(self.state.size, 6)

    def test_annotate_moves_ids_and_records_budget(self):
        state = self.state.annotate(['t2', 't4'])
        self.assertEqual(state.target_labeled, {'t2', 't4'})
        self.assertEqual(state.target_unlabeled, {'t1', 't3'})
        self.assertEqual((state.budget_spent, state.round, state.ledger), (2, 1, (2,)))
        self.assertEqual(state.size, self.state.size)
        self.assertEqual(state.initial_pool_size, 4)
        self.assertEqual(state.labeled, {'s1', 's2', 't2', 't4'})

    def test_empty_round_still_counts(self):
        state = self.state.annotate([])
        self.assertEqual((state.round, state.budget_spent, state.ledger), (1, 0, (0,)))

    def test_annotate_unknown_id(self):
        with self.assertRaises(InvalidInputError):
            self.state.annotate(['t9'])
        with self.assertRaises(InvalidInputError):
            self.state.annotate(['s1'])

    def test_overlapping_sets_rejected(self):
        with self.assertRaises(InvalidInputError):
            PoolState(target_labeled={'a'}, target_unlabeled={'a'})

    def test_ledger_must_match_budget(self):
        with self.assertRaises(InvalidInputError):
            PoolState(budget_spent=3, ledger=(1, 1))

    def test_drop_source(self):
        state = self.state.drop_source()
        self.assertEqual(state.source_labeled, frozenset())
        self.assertEqual(state.target_unlabeled, self.state.target_unlabeled)

    def test_dict_round_trip(self):
        state = self.state.annotate(['t1']).annotate(['t3', 't2'])
        self.assertEqual(PoolState.from_dict(state.to_dict()), state)
        self.assertEqual(state.to_dict()['target_labeled'], ['t1', 't2', 't3'])


if __name__ == '__main__':
    unittest.main()
