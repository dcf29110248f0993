#ifndef AGENT_KERNEL_H
#define AGENT_KERNEL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AkOutcome {
  AK_OUTCOME_COMPLETED = 0,
  AK_OUTCOME_MAX_TURNS_REACHED = 1,
  AK_OUTCOME_FAILED = 2,
} AkOutcome;

typedef enum AkStatus {
  AK_STATUS_OK = 0,
  AK_STATUS_NULL_ARGUMENT = 1,
  AK_STATUS_INVALID_UTF8 = 2,
  AK_STATUS_INVALID_ARGUMENT = 3,
  AK_STATUS_IO = 4,
  AK_STATUS_NOT_FOUND = 5,
  AK_STATUS_PANIC = 6,
} AkStatus;

typedef enum AkVerdict {
  AK_VERDICT_ALLOW = 0,
  AK_VERDICT_DENY = 1,
  AK_VERDICT_PROMPT = 2,
} AkVerdict;

/**
 * A merged execution policy.
 */
typedef struct AkPolicy AkPolicy;

/**
 * One agent session bound to a workspace and a model endpoint.
 */
typedef struct AkSession AkSession;

/**
 * An open state store.
 */
typedef struct AkStore AkStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Do not free.
 */
const char *ak_version(void);

/**
 * Returns a copy of this thread's last error message, or null if the last
 * call succeeded. Free with [`ak_string_free`].
 */
char *ak_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ak_string_free(char *s);

/**
 * Token estimate for `text`; 0 for a null or non-UTF-8 pointer.
 *
 * # Safety
 * `text` must be null or a valid NUL-terminated string.
 */
uint64_t ak_estimate_tokens(const char *text);

/**
 * Builds a policy from up to three rule documents; any may be null.
 *
 * # Safety
 * String arguments must be null or valid NUL-terminated strings; `out` must
 * be a valid pointer.
 */
enum AkStatus ak_policy_new(const char *system,
                            const char *organization,
                            const char *user,
                            struct AkPolicy **out);

/**
 * Evaluates a command given as `argc` argument strings.
 *
 * # Safety
 * `policy` must come from [`ak_policy_new`]; `argv` must point to `argc`
 * valid strings; `out` must be a valid pointer.
 */
enum AkStatus ak_policy_evaluate(const struct AkPolicy *policy,
                                 const char *const *argv,
                                 size_t argc,
                                 enum AkVerdict *out);

/**
 * # Safety
 * `policy` must be null or a handle from [`ak_policy_new`], not yet freed.
 */
void ak_policy_free(struct AkPolicy *policy);

/**
 * Opens a session. `model` is either `mock:<script path>`, which serves the
 * script on localhost, or a model id used with `api_base` and `api_key`.
 * `sandbox` is a mode name; null means read-only. `user_policy` may be null.
 *
 * # Safety
 * String arguments must be null or valid NUL-terminated strings; `out` must
 * be a valid pointer.
 */
enum AkStatus ak_session_new(const char *model,
                             const char *workspace,
                             const char *sandbox,
                             const char *user_policy,
                             const char *api_base,
                             const char *api_key,
                             struct AkSession **out);

/**
 * Runs one task to completion. `final_text` may be null; otherwise it
 * receives the final answer (or null when there is none).
 *
 * # Safety
 * `session` must come from [`ak_session_new`]; `prompt` must be a valid
 * string; `outcome` must be a valid pointer.
 */
enum AkStatus ak_session_run(struct AkSession *session,
                             const char *prompt,
                             enum AkOutcome *outcome,
                             char **final_text);

/**
 * The last run's events, one JSON object per line.
 *
 * # Safety
 * `session` must come from [`ak_session_new`]; `out` must be a valid pointer.
 */
enum AkStatus ak_session_events(const struct AkSession *session, char **out);

/**
 * # Safety
 * `session` must be null or a handle from [`ak_session_new`], not yet freed.
 */
void ak_session_free(struct AkSession *session);

/**
 * Opens (creating if needed) the state store at `path`.
 *
 * # Safety
 * `path` must be a valid string; `out` must be a valid pointer.
 */
enum AkStatus ak_store_open(const char *path, struct AkStore **out);

/**
 * Exports one session as a JSON document.
 *
 * # Safety
 * `store` must come from [`ak_store_open`]; `session_id` must be a valid
 * string; `out` must be a valid pointer.
 */
enum AkStatus ak_store_export(const struct AkStore *store, const char *session_id, char **out);

/**
 * # Safety
 * `store` must be null or a handle from [`ak_store_open`], not yet freed.
 */
void ak_store_free(struct AkStore *store);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGENT_KERNEL_H */
