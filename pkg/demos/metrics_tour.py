"""Ranking metrics on a hand-sized example.

A session shows items in the order below; the user engaged with items 7 and 8.
"""
from distillrec.evalkit import average_precision, mean_average_precision, ndcg_at_k, precision_at_k

ranked = [7, 1, 8, 2, 3, 4]
relevant = {7, 8}

for k in (1, 3, 5):
    print(f"K={k}: precision {precision_at_k(ranked, relevant, k):.3f}  ndcg {ndcg_at_k(ranked, relevant, k):.3f}")
print(f"average precision {average_precision(ranked, relevant):.4f}")  # (1/1 + 2/3) / 2

# moving the second hit up to rank 2 makes the list ideal
print(f"ideal ndcg@5 {ndcg_at_k([7, 8, 1, 2, 3, 4], relevant, 5):.1f}")
print(f"MAP over two sessions {mean_average_precision([ranked, [8, 7]], [relevant, relevant]):.4f}")
