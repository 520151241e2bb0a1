__global__ void softmax_row(const float* x, float* y, int cols) {
    const float* row = x + blockIdx.x * cols;
    float m = -1e30f;
    for (int c = 0; c < cols; ++c) m = fmaxf(m, row[c]);
    float s = 0.0f;
    for (int c = 0; c < cols; ++c) s += expf(row[c] - m);
    for (int c = 0; c < cols; ++c) y[blockIdx.x * cols + c] = expf(row[c] - m) / s;
}
