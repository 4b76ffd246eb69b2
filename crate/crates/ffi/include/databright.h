#ifndef DATABRIGHT_H
#define DATABRIGHT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum DatabrightStatus {
  DATABRIGHT_STATUS_OK = 0,
  DATABRIGHT_STATUS_NULL_ARGUMENT = 1,
  DATABRIGHT_STATUS_INVALID_UTF8 = 2,
  DATABRIGHT_STATUS_INVALID_ARGUMENT = 3,
  DATABRIGHT_STATUS_INSUFFICIENT_BALANCE = 4,
  DATABRIGHT_STATUS_UNKNOWN_ACCOUNT = 5,
  DATABRIGHT_STATUS_LEDGER = 6,
  DATABRIGHT_STATUS_SCENARIO = 7,
  DATABRIGHT_STATUS_PROTOCOL = 8,
  DATABRIGHT_STATUS_MALFORMED_REPORT = 9,
  DATABRIGHT_STATUS_IO = 10,
  DATABRIGHT_STATUS_PANIC = 11,
} DatabrightStatus;

/**
 * A token ledger.
 */
typedef struct DatabrightLedger DatabrightLedger;

/**
 * The result of running a scenario, or a parsed report file.
 */
typedef struct DatabrightReport DatabrightReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *databright_last_error(void);

/**
 * Library version as a static string.
 */
const char *databright_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void databright_string_free(char *s);

/**
 * New empty ledger. Never null.
 */
struct DatabrightLedger *databright_ledger_new(uint64_t seed);

/**
 * # Safety
 * `ledger` must come from this library and not have been freed.
 */
void databright_ledger_free(struct DatabrightLedger *ledger);

/**
 * Creates an account and writes its 32-byte id to `out_id`.
 *
 * # Safety
 * `ledger` must be a live handle; `out_id` must point to 32 writable bytes.
 */
enum DatabrightStatus databright_ledger_create_account(struct DatabrightLedger *ledger,
                                                       uint8_t *out_id);

/**
 * Mints `amount` of `class` (`"curator"`, `"credit"` or `"share:N"`).
 *
 * # Safety
 * `ledger` must be a live handle, `class` a NUL-terminated string and `to`
 * 32 readable bytes.
 */
enum DatabrightStatus databright_ledger_mint(struct DatabrightLedger *ledger,
                                             const char *class_,
                                             const uint8_t *to,
                                             uint64_t amount);

/**
 * # Safety
 * As for [`databright_ledger_mint`]; `from` and `to` are 32 bytes each.
 */
enum DatabrightStatus databright_ledger_transfer(struct DatabrightLedger *ledger,
                                                 const char *class_,
                                                 const uint8_t *from,
                                                 const uint8_t *to,
                                                 uint64_t amount);

/**
 * # Safety
 * `ledger` must be a live handle, `class` a NUL-terminated string,
 * `account` 32 readable bytes and `out` writable.
 */
enum DatabrightStatus databright_ledger_balance(const struct DatabrightLedger *ledger,
                                                const char *class_,
                                                const uint8_t *account,
                                                uint64_t *out);

/**
 * Number of committed transactions; 0 for a null handle.
 *
 * # Safety
 * `ledger` must be null or a live handle.
 */
uint64_t databright_ledger_height(const struct DatabrightLedger *ledger);

/**
 * Writes the 32-byte head hash to `out`.
 *
 * # Safety
 * `ledger` must be a live handle; `out` must point to 32 writable bytes.
 */
enum DatabrightStatus databright_ledger_head_hash(const struct DatabrightLedger *ledger,
                                                  uint8_t *out);

/**
 * Exports the transaction log, one `height hex` line per transaction.
 *
 * # Safety
 * `ledger` must be a live handle; `out` must be writable. Free the result
 * with [`databright_string_free`].
 */
enum DatabrightStatus databright_ledger_export_log(const struct DatabrightLedger *ledger,
                                                   char **out);

/**
 * Rebuilds a ledger by replaying an exported log.
 *
 * # Safety
 * `log` must be a NUL-terminated string; `out` must be writable.
 */
enum DatabrightStatus databright_ledger_import_log(uint64_t seed,
                                                   const char *log,
                                                   struct DatabrightLedger **out);

/**
 * Runs a scenario given as TOML text. `seed_override` replaces the
 * scenario seed when `use_seed_override` is true.
 *
 * # Safety
 * `scenario` must be a NUL-terminated string; `out` must be writable.
 */
enum DatabrightStatus databright_run_scenario(const char *scenario,
                                              bool use_seed_override,
                                              uint64_t seed_override,
                                              struct DatabrightReport **out);

/**
 * Parses a rendered report.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum DatabrightStatus databright_report_parse(const char *text, struct DatabrightReport **out);

/**
 * # Safety
 * `report` must come from this library and not have been freed.
 */
void databright_report_free(struct DatabrightReport *report);

/**
 * Renders the report: summary tables, marker line, JSON.
 *
 * # Safety
 * `report` must be a live handle; `out` must be writable. Free the result
 * with [`databright_string_free`].
 */
enum DatabrightStatus databright_report_render(const struct DatabrightReport *report, char **out);

/**
 * Re-checks the report's invariants. Writes the number of violations to
 * `out_count` and, when `out_text` is non-null, the violations one per
 * line.
 *
 * # Safety
 * `report` must be a live handle; `out_count` must be writable; `out_text`
 * must be null or writable.
 */
enum DatabrightStatus databright_report_verify(const struct DatabrightReport *report,
                                               size_t *out_count,
                                               char **out_text);

/**
 * Writes the 32-byte ledger head hash recorded in the report.
 *
 * # Safety
 * `report` must be a live handle; `out` must point to 32 writable bytes.
 */
enum DatabrightStatus databright_report_head_hash(const struct DatabrightReport *report,
                                                  uint8_t *out);

/**
 * Number of jobs in the report whose result was verified.
 *
 * # Safety
 * `report` must be null or a live handle.
 */
size_t databright_report_verified_jobs(const struct DatabrightReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DATABRIGHT_H */
