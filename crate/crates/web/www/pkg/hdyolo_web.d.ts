/* tslint:disable */
/* eslint-disable */

export class SynthPreview {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    boxes_json(): string;
    /**
     * `size × size × 4` bytes for an `ImageData`.
     */
    rgba(): Uint8Array;
    readonly size: number;
}

export function attention(xy: Float64Array, scale: number): Float64Array;

/**
 * JSON [`HypergraphView`] of flat `x0, y0, x1, y1, …` points.
 */
export function hypergraph(xy: Float64Array, epsilon: number): string;

export function synth_preview(regime: string, size: number, seed: number): SynthPreview;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_synthpreview_free: (a: number, b: number) => void;
    readonly attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly hypergraph: (a: number, b: number, c: number) => [number, number, number, number];
    readonly synth_preview: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly synthpreview_boxes_json: (a: number) => [number, number];
    readonly synthpreview_rgba: (a: number) => [number, number];
    readonly synthpreview_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
