package demo.math;

public final class Matrix {
    private final double[][] data;
    private final int rows;
    private final int cols;

    public Matrix(int rows, int cols) {
        this.rows = rows;
        this.cols = cols;
        this.data = new double[rows][cols];
    }

    public Matrix multiply(Matrix other) {
        if (cols != other.rows) {
            throw new IllegalArgumentException("shape mismatch: " + cols + " != " + other.rows);
        }
        Matrix out = new Matrix(rows, other.cols);
        for (int i = 0; i < rows; i++) {
            for (int j = 0; j < other.cols; j++) {
                double sum = 0.0;
                for (int k = 0; k < cols; k++) {
                    sum += data[i][k] * other.data[k][j];
                }
                out.data[i][j] = sum;
            }
        }
        return out;
    }

    public long nonZero() {
        long count = 0L;
        for (double[] row : data) {
            for (double v : row) {
                count += v != 0.0 ? 1 : 0;
            }
        }
        return count;
    }
}
