/*
 * Reference hook library for asch live attach.
 *
 *   cc -shared -fPIC -O2 -o libasch_hook.so asch_hook.c
 *
 * asch_hook() counts calls, in total and per number, and lets them
 * through.  asch_signal() is the SA_SIGINFO handler for the signal paths:
 * BRK/UDF demotions are emulated and resumed at pc+4; a fault with
 * pc == x8 < 600 is appended to the fault log and the process exits so the
 * next start can demote the site.
 */

#define _GNU_SOURCE
#include <signal.h>
#include <stdint.h>
#include <string.h>
#include <unistd.h>

#define ASCH_MAX_SYSNO 600
#define ASCH_BRK_IMM 0xf5c
#define ASCH_FAULT_EXIT 0x7a

/* L3 frame: must match asch.trampoline */
struct asch_frame {
    uint64_t claim;
    uint64_t pad;
    uint64_t x[31];
    uint64_t nzcv;
    uint64_t ret;
};

_Static_assert(__builtin_offsetof(struct asch_frame, x) == 16, "x0 slot");
_Static_assert(__builtin_offsetof(struct asch_frame, nzcv) == 264, "nzcv slot");
_Static_assert(__builtin_offsetof(struct asch_frame, ret) == 272, "return slot");

static volatile uint64_t hook_count;
static volatile uint64_t sysno_count[ASCH_MAX_SYSNO];
static int fault_fd = -1;

int asch_hook(struct asch_frame *f)
{
    __atomic_add_fetch(&hook_count, 1, __ATOMIC_RELAXED);
    if (f->x[8] < ASCH_MAX_SYSNO)
        __atomic_add_fetch(&sysno_count[f->x[8]], 1, __ATOMIC_RELAXED);
    return 0;
}

uint64_t asch_hook_count(void)
{
    return __atomic_load_n(&hook_count, __ATOMIC_RELAXED);
}

uint64_t asch_hook_calls(uint64_t sysno)
{
    if (sysno >= ASCH_MAX_SYSNO)
        return 0;
    return __atomic_load_n(&sysno_count[sysno], __ATOMIC_RELAXED);
}

void asch_set_fault_fd(int fd)
{
    fault_fd = fd;
}

static char *put_hex(char *p, uint64_t v)
{
    static const char digits[] = "0123456789abcdef";
    char tmp[16];
    int n = 0;
    do {
        tmp[n++] = digits[v & 0xf];
        v >>= 4;
    } while (v);
    *p++ = ' ';
    while (n)
        *p++ = tmp[--n];
    return p;
}

#if defined(__aarch64__) && defined(__linux__)
#include <ucontext.h>

static uint64_t raw_syscall(uint64_t nr, const uint64_t *a)
{
    register uint64_t x8 __asm__("x8") = nr;
    register uint64_t x0 __asm__("x0") = a[0];
    register uint64_t x1 __asm__("x1") = a[1];
    register uint64_t x2 __asm__("x2") = a[2];
    register uint64_t x3 __asm__("x3") = a[3];
    register uint64_t x4 __asm__("x4") = a[4];
    register uint64_t x5 __asm__("x5") = a[5];
    __asm__ volatile("svc #0"
                     : "+r"(x0)
                     : "r"(x8), "r"(x1), "r"(x2), "r"(x3), "r"(x4), "r"(x5)
                     : "memory");
    return x0;
}

static int is_demotion(int sig, uint64_t pc)
{
    uint32_t word = *(const uint32_t *)pc;
    if (sig == SIGTRAP)
        return word == (0xd4200000u | (ASCH_BRK_IMM << 5));
    return sig == SIGILL && word == 0;
}

void asch_signal(int sig, siginfo_t *info, void *uctx)
{
    mcontext_t *mc = &((ucontext_t *)uctx)->uc_mcontext;
    uint64_t pc = mc->pc;
    (void)info;

    if ((sig == SIGTRAP || sig == SIGILL) && is_demotion(sig, pc)) {
        struct asch_frame f;
        memset(&f, 0, sizeof f);
        for (int i = 0; i < 31; i++)
            f.x[i] = mc->regs[i];   /* unsigned long long in glibc's mcontext */
        f.ret = pc + 4;
        asch_hook(&f);
        mc->regs[0] = f.claim ? f.x[0] : raw_syscall(f.x[8], f.x);
        mc->pc = pc + 4;
        return;
    }
    if ((sig == SIGSEGV || sig == SIGBUS) && pc < ASCH_MAX_SYSNO && pc == mc->regs[8]
        && fault_fd >= 0) {
        char line[6 + 33 * 17 + 2];
        char *p = line;
        memcpy(p, "fault", 5);
        p += 5;
        p = put_hex(p, pc);
        p = put_hex(p, mc->sp);
        for (int i = 0; i < 31; i++)
            p = put_hex(p, mc->regs[i]);
        *p++ = '\n';
        (void)!write(fault_fd, line, (size_t)(p - line));
        _exit(ASCH_FAULT_EXIT);
    }
    /* not ours: fall back to the default action on return */
    signal(sig, SIG_DFL);
}

#else

/* Other hosts: the symbol exists so the library links, but never runs. */
void asch_signal(int sig, siginfo_t *info, void *uctx)
{
    char buf[32] = "asch_signal";
    char *p = put_hex(buf + 11, (uint64_t)sig);
    (void)info;
    (void)uctx;
    *p++ = '\n';
    (void)!write(2, buf, (size_t)(p - buf));
    signal(sig, SIG_DFL);
}

#endif
