const int BLOCK_SIZE = 128;
__global__ void neg(float* x, int n) {
    int i = blockIdx.x * BLOCK_SIZE + threadIdx.x;
    if (i < n) x[i] = -x[i];
}
