"""Report and console text templates."""

RUN_DONE = "{name} [{kind}] {status} -> {out_dir}"
SWEEP_DONE = "{name}: {ok}/{total} points succeeded -> {out_dir}"

REPORT_HEADER = (
    "SR magnetometry report\n"
    "======================\n"
    "{count} record(s)\n"
)

REPORT_SECTION = (
    "\n"
    "── {name} ──\n"
    "kind:   {kind}\n"
    "status: {status}\n"
    "hash:   {scenario_hash}\n"
    "seed:   {seed}\n"
    "dir:    {out_dir}\n"
)

FIT_HEADER = "fit: model={model} rss={rss:.4e} baseline={baseline:.4e}\n"
FIT_PEAK = "  peak {index}: center={center:.4f} Hz  fwhm={fwhm:.4f} Hz  amplitude={amplitude:.4e}\n"
FIT_PEAK_SPREAD = "  peak {index}: fwhm={fwhm:.3f} ± {spread:.3f} Hz over {repeats} repeat(s)\n"

METRIC_LINE = "  {key}: {value}\n"
CHECK_LINE = "  [{mark}] {metric} = {actual} (expected {expected} ± {tolerance})\n"
CHECKS_SUMMARY = "checks: {passed}/{total} passed\n"

SWEEP_TABLE_HEADER = "  {label:<28} {status:<8} {fwhm:>16} {center:>14}\n"
SWEEP_TABLE_ROW = "  {label:<28} {status:<8} {fwhm:>16} {center:>14}\n"
GYRO_LINE = "  gyromagnetic slope: {slope:.6e} Hz/T (± {stderr:.2e}), intercept {intercept:.4e} Hz\n"

GEOMETRY_RESULT = "{calc}: {value}\n"
