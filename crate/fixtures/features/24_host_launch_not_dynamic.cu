__global__ void fill(float* x, float v, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) x[i] = v;
}
void fill_all(float* x, float v, int n, int threads) {
    fill<<<(n + threads - 1) / threads, threads>>>(x, v, n);
}
