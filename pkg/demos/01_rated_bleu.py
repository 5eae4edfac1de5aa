"""Why a rated BLEU: the same question scored against plain and rated references.

Two region pairs show a dog; in the first the dogs differ in colour, in the
second in what they are doing. A question about colour is discriminative for
the first pair only. Plain BLEU cannot tell, because both pairs share one
reference pool. The rated variant rewards overlap with positively rated
references and charges overlap with negatively rated ones.
"""

from discrimq.corpus import tokenize
from discrimq.metrics import bleu_corpus, delta_bleu_corpus

POOL = ["what color is the dog", "what is the dog doing", "where is the dog"]
RATINGS = {
    "colour pair": [1.0, -0.5, -0.5],
    "action pair": [-0.5, 1.0, 0.5],
}
question = tokenize("what color is the dog?")

for name, weights in RATINGS.items():
    refs = [tokenize(r) for r in POOL]
    plain = bleu_corpus([question], [refs]).score
    rated = delta_bleu_corpus([question], [list(zip(refs, weights))])
    print(f"{name:12s} BLEU {plain:.3f}   rated BLEU {rated.score:.3f}   numerators {rated.numerators}")

print("\nWith every weight at 1.0 the rated score is plain BLEU:")
refs = [tokenize(r) for r in POOL]
print(bleu_corpus([question], [refs]).score, delta_bleu_corpus([question], [[(r, 1.0) for r in refs]]).score)
