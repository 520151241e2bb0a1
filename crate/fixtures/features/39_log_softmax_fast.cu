__global__ void log_softmax(const float* x, float* y, int cols) {
    const float* row = x + blockIdx.x * cols;
    float m = row[0];
    for (int c = 1; c < cols; ++c) m = max(m, row[c]);
    float s = 0.0f;
    for (int c = 0; c < cols; ++c) s += __expf(row[c] - m);
    float ls = __logf(s);
    for (int c = 0; c < cols; ++c) y[blockIdx.x * cols + c] = row[c] - m - ls;
}
