#define THREADS 256
__global__ void layernorm(const float* __restrict__ x, float* __restrict__ y, int cols, float eps) {
    __shared__ float red[THREADS];
    const float* row = x + blockIdx.x * cols;
    float s = 0.0f;
    for (int c = threadIdx.x; c < cols; c += THREADS) s += row[c];
    red[threadIdx.x] = s;
    __syncthreads();
    for (int w = THREADS / 2; w > 0; w >>= 1) {
        if (threadIdx.x < w) red[threadIdx.x] += red[threadIdx.x + w];
        __syncthreads();
    }
    float mean = red[0] / cols;
    __syncthreads();
    float v = 0.0f;
    for (int c = threadIdx.x; c < cols; c += THREADS) v += (row[c] - mean) * (row[c] - mean);
    red[threadIdx.x] = v;
    __syncthreads();
    for (int w = THREADS / 2; w > 0; w >>= 1) {
        if (threadIdx.x < w) red[threadIdx.x] += red[threadIdx.x + w];
        __syncthreads();
    }
    float inv = rsqrtf(red[0] / cols + eps);
    for (int c = threadIdx.x; c < cols; c += THREADS) y[blockIdx.x * cols + c] = (row[c] - mean) * inv;
}
