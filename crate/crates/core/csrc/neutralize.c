/* Signal-based neutralization.
 *
 * Rust cannot express sigsetjmp/siglongjmp directly, so the checkpoint and the
 * handler live here. A thread runs an operation body through smr_run, which
 * saves a checkpoint and calls back into Rust. If a neutralization signal
 * arrives while the thread's announcement says it is inside an operation, the
 * handler sets the quiescent bit and jumps back to the checkpoint; smr_run then
 * returns 1. Signals that arrive while quiescent (or outside smr_run) are
 * ignored.
 */

#define _GNU_SOURCE
#include <errno.h>
#include <pthread.h>
#include <setjmp.h>
#include <signal.h>
#include <stdatomic.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>

struct smr_ctx {
    sigjmp_buf env;
    _Atomic uint64_t *announce;
};

static _Thread_local struct smr_ctx *volatile current_ctx;
static int installed_signo;

static void smr_handler(int signo) {
    (void)signo;
    struct smr_ctx *ctx = current_ctx;
    if (ctx == NULL) {
        return;
    }
    uint64_t word = atomic_load_explicit(ctx->announce, memory_order_seq_cst);
    if (word & 1) {
        return;
    }
    atomic_fetch_or_explicit(ctx->announce, 1, memory_order_seq_cst);
    siglongjmp(ctx->env, 1);
}

int smr_install_handler(int signo) {
    installed_signo = signo;
    struct sigaction sa;
    memset(&sa, 0, sizeof sa);
    sa.sa_handler = smr_handler;
    sigemptyset(&sa.sa_mask);
    sa.sa_flags = SA_RESTART;
    return sigaction(signo, &sa, NULL);
}

struct smr_ctx *smr_ctx_new(_Atomic uint64_t *announce) {
    struct smr_ctx *ctx = calloc(1, sizeof *ctx);
    if (ctx != NULL) {
        ctx->announce = announce;
    }
    return ctx;
}

void smr_ctx_free(struct smr_ctx *ctx) { free(ctx); }

/* Returns 0 if body ran to completion, 1 if it was neutralized. The frames of
 * body that a jump skips must not own resources. */
int smr_run(struct smr_ctx *ctx, void (*body)(void *), void *arg) {
    struct smr_ctx *volatile saved = current_ctx;
    /* Not saving the mask keeps sigsetjmp free of a syscall. The handler runs
     * with its own signal blocked, so unblock it after a jump. */
    if (sigsetjmp(ctx->env, 0) != 0) {
        current_ctx = saved;
        sigset_t set;
        sigemptyset(&set);
        sigaddset(&set, installed_signo);
        pthread_sigmask(SIG_UNBLOCK, &set, NULL);
        return 1;
    }
    current_ctx = ctx;
    body(arg);
    current_ctx = saved;
    return 0;
}

/* Sleeps for up to nanos with signo blocked, waking early once *stop becomes
 * nonzero. A signal sent meanwhile stays pending and is handled when the mask
 * is restored, which is how a descheduled process observes neutralization the
 * next time it runs. */
void smr_stall_masked(int signo, uint64_t nanos, const _Atomic uint8_t *stop) {
    sigset_t block, old;
    sigemptyset(&block);
    sigaddset(&block, signo);
    pthread_sigmask(SIG_BLOCK, &block, &old);

    struct timespec start, now;
    clock_gettime(CLOCK_MONOTONIC, &start);
    for (;;) {
        if (stop != NULL && atomic_load_explicit(stop, memory_order_acquire) != 0) {
            break;
        }
        clock_gettime(CLOCK_MONOTONIC, &now);
        uint64_t elapsed = (uint64_t)(now.tv_sec - start.tv_sec) * 1000000000ull
                           + (uint64_t)now.tv_nsec - (uint64_t)start.tv_nsec;
        if (elapsed >= nanos) {
            break;
        }
        uint64_t left = nanos - elapsed;
        struct timespec slice = {0, left < 1000000ull ? (long)left : 1000000L};
        while (nanosleep(&slice, &slice) != 0 && errno == EINTR) {
        }
    }

    pthread_sigmask(SIG_SETMASK, &old, NULL);
}
