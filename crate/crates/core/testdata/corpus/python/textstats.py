import re
import math
from collections import Counter

WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def tokenize(text):
    return WORD_RE.findall(text.lower())


def word_counts(lines):
    counts = Counter()
    for line in lines:
        counts.update(tokenize(line))
    return counts


def entropy(counts):
    total = sum(counts.values())
    if total == 0:
        return 0.0
    result = 0.0
    for count in counts.values():
        prob = count / total
        result -= prob * math.log(prob, 2)
    return result


def top_words(counts, n=10, min_len=2):
    words = [(w, c) for w, c in counts.most_common() if len(w) >= min_len]
    return words[:n]


def ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def jaccard(a, b):
    left, right = set(a), set(b)
    if not left and not right:
        return 1.0
    return len(left & right) / len(left | right)


def summarize(text, max_words=5):
    counts = word_counts(text.splitlines())
    summary = {"words": sum(counts.values()), "unique": len(counts)}
    summary["entropy"] = round(entropy(counts), 4)
    summary["top"] = [word for word, _ in top_words(counts, n=max_words)]
    return summary


def compare(first, second, n=2):
    left = ngrams(tokenize(first), n)
    right = ngrams(tokenize(second), n)
    score = jaccard(left, right)
    shared = sorted(set(left) & set(right))
    return {"score": score, "shared": shared, "left": len(left), "right": len(right)}


if __name__ == "__main__":
    sample = "the quick brown fox jumps over the lazy dog"
    print(summarize(sample))
    print(compare(sample, "the lazy dog sleeps while the quick fox runs", n=2))
