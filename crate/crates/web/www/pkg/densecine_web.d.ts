/* tslint:disable */
/* eslint-disable */

/**
 * One generated phantom case plus its sector partition.
 */
export class PhantomView {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Myocardium coloured by sector TOS: blue up to the threshold, red beyond.
     */
    activation_map_rgba(tos: Float64Array, threshold_ms: number): Uint8Array;
    cine_frames(): number;
    dense_dt_ms(): number;
    dense_frames(): number;
    /**
     * Grey-level frame `t` (0-based) of the DENSE or cine sequence.
     */
    frame_rgba(t: number, cine: boolean): Uint8Array;
    grid(): number;
    gt_tos(): Float64Array;
    /**
     * Per-sector LMA flags (1 = late) for the given TOS curve and threshold.
     */
    lma_flags(tos: Float64Array, threshold_ms: number): Uint8Array;
    /**
     * Generates a phantom with a random late-activation pattern drawn from
     * `seed`. `grid` and `sectors` override the default 64 px / 128 sectors.
     */
    constructor(seed: bigint, grid: number, sectors: number, noise: number);
    /**
     * TOS re-extracted from the ground-truth strain with a custom onset threshold.
     */
    rule_tos(onset_threshold: number): Float64Array;
    sectors(): number;
    /**
     * Ground-truth strain matrix as an `N × T` heatmap, sectors along rows.
     */
    strain_rgba(): Uint8Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_phantomview_free: (a: number, b: number) => void;
    readonly phantomview_activation_map_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly phantomview_cine_frames: (a: number) => number;
    readonly phantomview_dense_dt_ms: (a: number) => number;
    readonly phantomview_dense_frames: (a: number) => number;
    readonly phantomview_frame_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly phantomview_grid: (a: number) => number;
    readonly phantomview_gt_tos: (a: number) => [number, number];
    readonly phantomview_lma_flags: (a: number, b: number, c: number, d: number) => [number, number];
    readonly phantomview_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly phantomview_rule_tos: (a: number, b: number) => [number, number];
    readonly phantomview_sectors: (a: number) => number;
    readonly phantomview_strain_rgba: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
