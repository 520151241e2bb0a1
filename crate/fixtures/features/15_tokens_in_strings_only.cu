#include <cstdio>
__global__ void report(int n) {
    if (threadIdx.x == 0) printf("wmma::mma_sync __syncthreads atomicAdd expf( %d\n", n);
}
