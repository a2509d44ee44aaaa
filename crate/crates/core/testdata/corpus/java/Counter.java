package demo.util;

import java.util.HashMap;
import java.util.Map;

/* A small word counter used by the examples. */
public class Counter {
    private final Map<String, Integer> counts = new HashMap<>();
    private int total = 0;

    public void add(String word) {
        // count one occurrence
        counts.put(word, counts.getOrDefault(word, 0) + 1);
        total++;
    }

    public int get(String word) {
        return counts.getOrDefault(word, 0);
    }

    public double frequency(String word) {
        if (total == 0) {
            return 0.0;
        }
        return (double) get(word) / total;
    }

    public boolean isEmpty() {
        return total == 0 && counts.isEmpty();
    }

    @Override
    public String toString() {
        return "Counter{total=" + total + ", distinct=" + counts.size() + "}";
    }
}
